//! Flat `key=value` run configuration.
//!
//! One file covers generation, model, retrieval, training, evaluation,
//! ablation and paths. Blank lines and `#` comments are ignored, unknown
//! keys are rejected, and every key has a default (see [`KEYS`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{GenConfig, InputFormat};
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::model::{AblationVariant, ModelConfig};
use crate::retrieval::Similarity;
use crate::trainer::TrainConfig;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("T", "number of synthetic domains"),
    ("users", "synthetic users"),
    ("items_per_domain", "synthetic items per domain"),
    (
        "overlap_fraction",
        "share of a domain's items re-used by the next domain",
    ),
    (
        "interactions_per_user",
        "mean synthetic clicks per user and domain",
    ),
    ("latent_dim", "synthetic latent categories"),
    (
        "domain_correlation",
        "weight of the shared user factor (rho)",
    ),
    (
        "dims",
        "comma-separated layer widths; dims[0] is the embedding width",
    ),
    ("heads", "attention heads"),
    (
        "neighbors",
        "neighbors sampled per node and hop in training",
    ),
    ("tau", "InfoNCE temperature"),
    ("d_max", "largest distinct shortest-path bucket"),
    ("variant", "Vanilla | HU | HUplus | PHI | EHI | EHIplus"),
    ("linear", "drop the hidden-layer nonlinearity (true/false)"),
    ("score", "inner_product | cosine"),
    ("k", "similar items per hyperedge-i"),
    (
        "time_window",
        "path-based retrieval window in timestamp units",
    ),
    (
        "refresh_interval",
        "steps between embedding-based hyperedge rebuilds",
    ),
    (
        "similarity",
        "embedding-based retrieval similarity: inner_product | cosine",
    ),
    ("batch_size", "positives per step"),
    ("negatives", "sampled negatives per positive"),
    (
        "epochs",
        "training epochs of ceil(|train| / batch_size) steps",
    ),
    (
        "steps",
        "fixed step budget overriding epochs; 0 means use epochs",
    ),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam epsilon"),
    ("checkpoint_every", "steps between checkpoints; 0 disables"),
    ("log_every", "steps per training-log loss line"),
    ("seed", "run seed"),
    ("ks", "comma-separated evaluation cutoffs"),
    ("variants", "comma-separated variants for ablate"),
    ("seeds", "comma-separated seeds for ablate"),
    (
        "domain_sweep",
        "ablate also re-generates with T' = 1..T domains (true/false)",
    ),
    ("format", "prepare input format: native | amazon_ratings"),
    (
        "inputs",
        "comma-separated prepare input files, one domain each",
    ),
    ("binarize_threshold", "minimum rating kept as a click"),
    ("kcore", "k-core threshold"),
    ("data", "dataset directory read by train, eval and ablate"),
    ("checkpoint", "checkpoint read by eval"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    pub variants: Vec<AblationVariant>,
    pub seeds: Vec<u64>,
    pub domain_sweep: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            variants: AblationVariant::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            domain_sweep: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub format: String,
    pub inputs: Vec<PathBuf>,
    pub binarize_threshold: u8,
    pub kcore: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            format: "native".into(),
            inputs: Vec::new(),
            binarize_threshold: 4,
            kcore: 5,
        }
    }
}

impl PrepareConfig {
    pub fn input_format(&self) -> Result<InputFormat> {
        self.format.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub prepare: PrepareConfig,
    pub paths: PathsConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!(
            "`{key}`: expected true or false, got `{other}`"
        ))),
    }
}

fn parse_similarity(key: &str, value: &str) -> Result<Similarity> {
    match value.trim() {
        "inner_product" | "dot" => Ok(Similarity::InnerProduct),
        "cosine" => Ok(Similarity::Cosine),
        other => Err(Error::Config(format!(
            "`{key}`: expected inner_product or cosine, got `{other}`"
        ))),
    }
}

fn similarity_name(s: Similarity) -> &'static str {
    match s {
        Similarity::InnerProduct => "inner_product",
        Similarity::Cosine => "cosine",
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "T" => self.gen.domains = parse_num(key, v)?,
            "users" => self.gen.users = parse_num(key, v)?,
            "items_per_domain" => self.gen.items_per_domain = parse_num(key, v)?,
            "overlap_fraction" => self.gen.overlap_fraction = parse_num(key, v)?,
            "interactions_per_user" => self.gen.interactions_per_user = parse_num(key, v)?,
            "latent_dim" => self.gen.latent_dim = parse_num(key, v)?,
            "domain_correlation" => self.gen.domain_correlation = parse_num(key, v)?,
            "dims" => self.model.dims = parse_list(key, v)?,
            "heads" => self.model.heads = parse_num(key, v)?,
            "neighbors" => self.model.neighbors = parse_num(key, v)?,
            "tau" => self.model.tau = parse_num(key, v)?,
            "d_max" => self.model.d_max = parse_num(key, v)?,
            "variant" => {
                let variant: AblationVariant = v.parse()?;
                self.model = self.model.clone().with_variant(variant);
            }
            "linear" => self.model.linear = parse_bool(key, v)?,
            "score" => self.model.score = parse_similarity(key, v)?,
            "k" => self.model.retrieval.k = parse_num(key, v)?,
            "time_window" => self.model.retrieval.time_window = parse_num(key, v)?,
            "refresh_interval" => self.model.retrieval.refresh_interval = parse_num(key, v)?,
            "similarity" => self.model.retrieval.similarity = parse_similarity(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "negatives" => self.train.negatives = parse_num(key, v)?,
            "epochs" => self.train.epochs = parse_num(key, v)?,
            "steps" => self.train.steps = Some(parse_num::<usize>(key, v)?).filter(|&s| s > 0),
            "lr" => self.train.adam.lr = parse_num(key, v)?,
            "beta1" => self.train.adam.beta1 = parse_num(key, v)?,
            "beta2" => self.train.adam.beta2 = parse_num(key, v)?,
            "eps" => self.train.adam.eps = parse_num(key, v)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_num(key, v)?,
            "log_every" => self.train.log_every = parse_num(key, v)?,
            "seed" => self.train.seed = parse_num(key, v)?,
            "ks" => self.eval.ks = parse_list(key, v)?,
            "variants" => {
                self.ablate.variants = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "seeds" => self.ablate.seeds = parse_list(key, v)?,
            "domain_sweep" => self.ablate.domain_sweep = parse_bool(key, v)?,
            "format" => {
                v.parse::<InputFormat>()?;
                self.prepare.format = v.to_string();
            }
            "inputs" => {
                self.prepare.inputs = v
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "binarize_threshold" => self.prepare.binarize_threshold = parse_num(key, v)?,
            "kcore" => self.prepare.kcore = parse_num(key, v)?,
            "data" => {
                self.paths.data = Some(PathBuf::from(v)).filter(|p| !p.as_os_str().is_empty())
            }
            "checkpoint" => {
                self.paths.checkpoint = Some(PathBuf::from(v)).filter(|p| !p.as_os_str().is_empty())
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Current value of `key` in the same syntax `set` accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        Ok(match key {
            "T" => self.gen.domains.to_string(),
            "users" => self.gen.users.to_string(),
            "items_per_domain" => self.gen.items_per_domain.to_string(),
            "overlap_fraction" => self.gen.overlap_fraction.to_string(),
            "interactions_per_user" => self.gen.interactions_per_user.to_string(),
            "latent_dim" => self.gen.latent_dim.to_string(),
            "domain_correlation" => self.gen.domain_correlation.to_string(),
            "dims" => join(&self.model.dims),
            "heads" => self.model.heads.to_string(),
            "neighbors" => self.model.neighbors.to_string(),
            "tau" => self.model.tau.to_string(),
            "d_max" => self.model.d_max.to_string(),
            "variant" => self.model.variant.to_string(),
            "linear" => self.model.linear.to_string(),
            "score" => similarity_name(self.model.score).to_string(),
            "k" => self.model.retrieval.k.to_string(),
            "time_window" => self.model.retrieval.time_window.to_string(),
            "refresh_interval" => self.model.retrieval.refresh_interval.to_string(),
            "similarity" => similarity_name(self.model.retrieval.similarity).to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "negatives" => self.train.negatives.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "steps" => self.train.steps.unwrap_or(0).to_string(),
            "lr" => self.train.adam.lr.to_string(),
            "beta1" => self.train.adam.beta1.to_string(),
            "beta2" => self.train.adam.beta2.to_string(),
            "eps" => self.train.adam.eps.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "log_every" => self.train.log_every.to_string(),
            "seed" => self.train.seed.to_string(),
            "ks" => join(&self.eval.ks),
            "variants" => join(&self.ablate.variants),
            "seeds" => join(&self.ablate.seeds),
            "domain_sweep" => self.ablate.domain_sweep.to_string(),
            "format" => self.prepare.format.clone(),
            "inputs" => self
                .prepare
                .inputs
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
            "binarize_threshold" => self.prepare.binarize_threshold.to_string(),
            "kcore" => self.prepare.kcore.to_string(),
            "data" => path(&self.paths.data),
            "checkpoint" => path(&self.paths.checkpoint),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        })
    }

    /// Parse config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    idx + 1
                ))
            })?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", idx + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        RunConfig::parse(&text).map_err(|e| e.in_file(path))
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn resolved(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("ks must list positive cutoffs".into()));
        }
        if self.ablate.variants.is_empty() || self.ablate.seeds.is_empty() {
            return Err(Error::Config("variants and seeds must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["dims=16,8", "variant=PHI", "steps=40", "data=/tmp/x"])
            .unwrap();
        let again = RunConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = RunConfig::parse("seed=3\nbogus=1\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config(m) if m.starts_with("line 2:")),
            "{err}"
        );
    }

    #[test]
    fn every_listed_key_resolves() {
        let cfg = RunConfig::default();
        for (k, _) in KEYS {
            cfg.get(k).unwrap();
        }
        assert_eq!(cfg.resolved().lines().count(), KEYS.len());
    }
}
