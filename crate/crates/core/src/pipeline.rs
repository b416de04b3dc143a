//! The commands behind the command-line tool, as library functions.
//!
//! Each command reads a [`RunConfig`], writes its artifacts into an output
//! directory together with the resolved configuration (`resolved.cfg`).

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{
    binarize, generate_synthetic, k_core_filter, leave_one_out_split, parse_interactions,
    read_dataset_dir, remap_ids, write_dataset_dir, Dataset, GenConfig, IdMaps, InputFormat,
    SplitDataset,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig, Group, Metric, MetricsTable};
use crate::model::{AblationVariant, ModelConfig};
use crate::trainer::{Checkpoint, TrainConfig, Trainer};

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt.json";
pub const METRICS_TSV: &str = "metrics.tsv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const ABLATION_TSV: &str = "ablation.tsv";
pub const ABLATION_RUNS_TSV: &str = "ablation_runs.tsv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::from(e).in_file(path))
}

fn start(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::from(e).in_file(out))?;
    write(&out.join(RESOLVED_CONFIG), cfg.resolved())
}

/// Generate, deduplicate and split a synthetic dataset.
pub fn synthesize(gen: &GenConfig, seed: u64) -> Result<SplitDataset> {
    synthesize_prefix(gen, seed, gen.domains)
}

/// Like [`synthesize`] but keeping only the first `domains` domains of the
/// full generated world, so domain 0 is identical for every prefix.
pub fn synthesize_prefix(gen: &GenConfig, seed: u64, domains: usize) -> Result<SplitDataset> {
    let mut ds = generate_synthetic(gen, seed)?;
    ds.dedup();
    let ds = if domains < ds.domains {
        ds.restrict_domains(domains)
    } else {
        ds
    };
    Ok(leave_one_out_split(&ds))
}

fn identity_maps(ds: &Dataset) -> IdMaps {
    IdMaps {
        users: (0..ds.user_count).map(|u| format!("u{u}")).collect(),
        items: (0..ds.item_count).map(|i| format!("i{i}")).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSummary {
    pub domains: usize,
    pub users: usize,
    pub items: usize,
    pub train_records: usize,
    pub test_records: usize,
}

impl DatasetSummary {
    fn of(split: &SplitDataset) -> Self {
        DatasetSummary {
            domains: split.train.domains,
            users: split.train.user_count,
            items: split.train.item_count,
            train_records: split.train.records.len(),
            test_records: split.test.len(),
        }
    }
}

/// Parse the input files, binarize, k-core filter, remap and
/// split.
pub fn cmd_prepare(cfg: &RunConfig, out: &Path) -> Result<DatasetSummary> {
    start(cfg, out)?;
    let format = cfg.prepare.input_format()?;
    if cfg.prepare.inputs.is_empty() {
        return Err(Error::Config("prepare needs `inputs`".into()));
    }
    let mut raw = Vec::new();
    for (domain, path) in cfg.prepare.inputs.iter().enumerate() {
        let file = fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
        raw.extend(
            parse_interactions(BufReader::new(file), format, domain)
                .map_err(|e| e.in_file(path))?,
        );
    }
    let clicks = binarize(&raw, cfg.prepare.binarize_threshold);
    let kept = k_core_filter(&clicks, cfg.prepare.kcore);
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no interactions survive the {}-core filter",
            cfg.prepare.kcore
        )));
    }
    // Native records name their domain; otherwise each file is one domain.
    let domains = (format == InputFormat::AmazonRatings).then_some(cfg.prepare.inputs.len());
    let (ds, maps) = remap_ids(&kept, domains)?;
    let split = leave_one_out_split(&ds);
    write_dataset_dir(out, &split, &maps)?;
    Ok(DatasetSummary::of(&split))
}

/// Generate a synthetic dataset with the run seed and write it like `prepare`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<DatasetSummary> {
    start(cfg, out)?;
    let split = synthesize(&cfg.gen, cfg.train.seed)?;
    write_dataset_dir(out, &split, &identity_maps(&split.train))?;
    Ok(DatasetSummary::of(&split))
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.paths
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("`data` must name a dataset directory".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Train on `data`, resuming from `checkpoint` when one is configured.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    start(cfg, out)?;
    let split = read_dataset_dir(data_dir(cfg)?)?;
    let mut trainer = match &cfg.paths.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.model(Some(&cfg.model)).map_err(|e| e.in_file(path))?;
            Trainer::resume(split.train, &ckpt, cfg.train.clone())?
        }
        None => Trainer::new(split.train, cfg.model.clone(), cfg.train.clone())?,
    }
    .with_out_dir(out);
    let log_path = out.join(TRAIN_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::from(e).in_file(&log_path))?;
    let events = trainer.run(&mut log)?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&checkpoint)?;
    let final_loss = events.iter().rev().find_map(|e| match e {
        crate::trainer::LogEvent::Step { loss, .. } => Some(*loss),
        _ => None,
    });
    Ok(TrainSummary {
        steps: trainer.step,
        final_loss,
        checkpoint,
    })
}

/// Evaluate `checkpoint` on the test records of `data`.
/// The model settings come from the checkpoint and replace those of `cfg`
/// in `resolved.cfg`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<MetricsTable> {
    cfg.validate()?;
    let path = cfg
        .paths
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("`checkpoint` must be set".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let mut cfg = cfg.clone();
    cfg.model = ckpt.config.clone();
    cfg.train.seed = ckpt.seed;
    start(&cfg, out)?;
    let split = read_dataset_dir(data_dir(&cfg)?)?;
    let train_cfg = cfg.train.clone();
    let trainer = Trainer::resume(split.train.clone(), &ckpt, train_cfg)?;
    let (table, _) = evaluate(&trainer.model, trainer.context(), &split, &cfg.eval)?;
    write(&out.join(METRICS_TSV), table.to_tsv())?;
    write(&out.join(METRICS_JSONL), table.to_jsonl())?;
    Ok(table)
}

/// Train for the configured budget and evaluate.
pub fn train_and_evaluate(
    split: &SplitDataset,
    model: &ModelConfig,
    train: &TrainConfig,
    eval: &EvalConfig,
) -> Result<(Trainer, MetricsTable)> {
    let mut trainer = Trainer::new(split.train.clone(), model.clone(), train.clone())?;
    trainer.run(&mut std::io::sink())?;
    let (table, _) = evaluate(&trainer.model, trainer.context(), split, eval)?;
    Ok((trainer, table))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub variant: AblationVariant,
    pub domains: usize,
    pub seed: u64,
    pub table: MetricsTable,
}

/// Seed-level results of an ablation with seed-averaged summaries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    /// Seed values of one metric cell, skipping seeds where it is absent.
    pub fn values(
        &self,
        variant: AblationVariant,
        domains: usize,
        domain: usize,
        group: Group,
        metric: Metric,
        k: Option<usize>,
    ) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant && r.domains == domains)
            .filter_map(|r| r.table.get(domain, group, metric, k))
            .collect()
    }

    /// Mean and standard error over seeds.
    pub fn mean_se(
        &self,
        variant: AblationVariant,
        domains: usize,
        domain: usize,
        group: Group,
        metric: Metric,
        k: Option<usize>,
    ) -> Option<(f64, f64)> {
        mean_se(&self.values(variant, domains, domain, group, metric, k))
    }

    /// Columns `variant T domain group metric K mean se seeds`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tT\tdomain\tgroup\tmetric\tK\tmean\tse\tseeds\n");
        let mut cells: Vec<(usize, AblationVariant, usize)> = Vec::new();
        for (idx, r) in self.runs.iter().enumerate() {
            if !cells
                .iter()
                .any(|&(_, v, d)| v == r.variant && d == r.domains)
            {
                cells.push((idx, r.variant, r.domains));
            }
        }
        for &(first, variant, domains) in &cells {
            for row in &self.runs[first].table.rows {
                let vals = self.values(variant, domains, row.domain, row.group, row.metric, row.k);
                let k = row.k.map_or_else(|| "-".to_string(), |k| k.to_string());
                let group = row
                    .group
                    .map_or_else(|| "ALL".to_string(), |g| format!("G{g}"));
                let (mean, se) = match mean_se(&vals) {
                    Some((m, s)) => (format!("{m:.6}"), format!("{s:.6}")),
                    None => ("NA".into(), "NA".into()),
                };
                let _ = writeln!(
                    out,
                    "{variant}\t{domains}\t{}\t{group}\t{}\t{k}\t{mean}\t{se}\t{}",
                    row.domain,
                    row.metric,
                    vals.len()
                );
            }
        }
        out
    }

    /// Columns `variant T seed domain group metric K value count`.
    pub fn runs_tsv(&self) -> String {
        let mut out = String::from("variant\tT\tseed\t");
        let mut header = true;
        for r in &self.runs {
            for line in r.table.to_tsv().lines() {
                if header {
                    out.push_str(line);
                    out.push('\n');
                    header = false;
                } else if !line.starts_with("domain\t") {
                    let _ = writeln!(out, "{}\t{}\t{}\t{line}", r.variant, r.domains, r.seed);
                }
            }
        }
        out
    }
}

/// Sample mean and standard error of the mean (0 for a single value).
pub fn mean_se(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Train and evaluate every variant under every seed. Without `data`, each
/// seed generates its own synthetic dataset; with `domain_sweep`, each
/// domain-count prefix `1..=T` is run as well.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<AblationReport> {
    start(cfg, out)?;
    let loaded = match (&cfg.paths.data, cfg.ablate.domain_sweep) {
        (Some(_), true) => {
            return Err(Error::Config(
                "domain_sweep re-generates data; unset `data`".into(),
            ))
        }
        (Some(dir), false) => Some(read_dataset_dir(dir)?),
        (None, _) => None,
    };
    let counts: Vec<usize> = match (&loaded, cfg.ablate.domain_sweep) {
        (Some(split), _) => vec![split.train.domains],
        (None, true) => (1..=cfg.gen.domains).collect(),
        (None, false) => vec![cfg.gen.domains],
    };
    let mut report = AblationReport::default();
    for &domains in &counts {
        for &seed in &cfg.ablate.seeds {
            let split = match &loaded {
                Some(split) => split.clone(),
                None => synthesize_prefix(&cfg.gen, seed, domains)?,
            };
            for &variant in &cfg.ablate.variants {
                let model = cfg.model.clone().with_variant(variant);
                let train = TrainConfig {
                    seed,
                    ..cfg.train.clone()
                };
                let (_, table) = train_and_evaluate(&split, &model, &train, &cfg.eval)?;
                report.runs.push(AblationRun {
                    variant,
                    domains,
                    seed,
                    table,
                });
            }
        }
    }
    write(&out.join(ABLATION_TSV), report.to_tsv())?;
    write(&out.join(ABLATION_RUNS_TSV), report.runs_tsv())?;
    Ok(report)
}
