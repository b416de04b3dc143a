//! Negative sampling, the contrastive objective and the optimization loop.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{ItemDistances, MultiDomainGraph};
use crate::model::{AblationVariant, Fanout, ForwardContext, H3Model, ModelConfig};
use crate::numeric::{logsumexp, AdamConfig, AdamState, Tape, Tensor2, Var};
use crate::retrieval::{build_hyperedge_sets, RetrievalMethod, Similarity};

/// Rejections per negative before an observed item is accepted.
pub const MAX_REJECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            negatives: 64,
            epochs: 30,
            steps: None,
            seed: 1,
            checkpoint_every: 0,
            log_every: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.negatives == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size, negatives and log_every must be at least 1".into(),
            ));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// `ceil(|train| / batch_size)` steps per epoch unless `steps` is set.
    pub fn total_steps(&self, train_records: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * train_records.div_ceil(self.batch_size))
    }
}

/// The generator for step `step`: a fixed stream of the run seed, so no
/// generator state has to be carried across steps or checkpoints.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step as u64).wrapping_add(1));
    rng
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub domain: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub samples: Vec<Sample>,
    /// Negatives accepted although observed, after the rejection cap.
    pub observed_negatives: usize,
}

/// Observed `(user, item, domain)` training triples.
#[derive(Debug, Clone)]
pub struct ObservedPairs(HashSet<(usize, usize, usize)>);

impl ObservedPairs {
    pub fn new(train: &Dataset) -> Self {
        ObservedPairs(
            train
                .records
                .iter()
                .map(|r| (r.user, r.item, r.domain))
                .collect(),
        )
    }

    pub fn contains(&self, user: usize, item: usize, domain: usize) -> bool {
        self.0.contains(&(user, item, domain))
    }
}

/// `batch_size` positives drawn uniformly from the training records, each
/// with `negatives` items drawn uniformly from its own domain.
pub fn sample_batch<R: Rng>(
    train: &Dataset,
    observed: &ObservedPairs,
    batch_size: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<Batch> {
    if train.records.is_empty() {
        return Err(Error::Data(
            "cannot sample from an empty training set".into(),
        ));
    }
    let mut batch = Batch {
        samples: Vec::with_capacity(batch_size),
        observed_negatives: 0,
    };
    for _ in 0..batch_size {
        let r = train.records[rng.random_range(0..train.records.len())];
        let pool = &train.per_domain_items[r.domain];
        let mut negs = Vec::with_capacity(negatives);
        for _ in 0..negatives {
            let mut item = pool[rng.random_range(0..pool.len())];
            let mut tries = 0;
            while observed.contains(r.user, item, r.domain) {
                if tries == MAX_REJECTIONS {
                    batch.observed_negatives += 1;
                    break;
                }
                item = pool[rng.random_range(0..pool.len())];
                tries += 1;
            }
            negs.push(item);
        }
        batch.samples.push(Sample {
            user: r.user,
            domain: r.domain,
            positive: r.item,
            negatives: negs,
        });
    }
    Ok(batch)
}

/// `-log(exp(s+/tau) / (exp(s+/tau) + sum exp(s-/tau)))`.
pub fn infonce_loss(positive: f64, negatives: &[f64], tau: f64) -> f64 {
    let logits: Vec<f64> = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|s| s / tau)
        .collect();
    logsumexp(&logits) - positive / tau
}

/// Mean InfoNCE over the rows of a `B x (1 + N_neg)` score matrix whose
/// column 0 holds the positives.
pub fn infonce_on_tape(tape: &mut Tape, scores: Var, tau: f64) -> Result<Var> {
    let logits = tape.scale(scores, 1.0 / tau);
    let lse = tape.logsumexp_rows(logits);
    let pos = tape.slice_cols(logits, 0, 1)?;
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean_all(per_row))
}

/// Scores of each sample against `[positive, negatives...]`, recorded on
/// `tape`. Samples are grouped by domain when item refinement depends on
/// the target domain; rows follow that grouping.
pub fn batch_scores<R: Rng>(
    model: &H3Model,
    tape: &mut Tape,
    ctx: ForwardContext<'_>,
    samples: &[Sample],
    fanout: Fanout,
    rng: &mut R,
) -> Result<Var> {
    let graph = ctx.graph;
    let t = graph.domains();
    let un = graph.user_node_count();
    let mut by_target: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        let key = if model.config.variant.hyper_i().is_some() {
            s.domain
        } else {
            0
        };
        by_target.entry(key).or_default().push(s);
    }
    let mut parts = Vec::with_capacity(by_target.len());
    for (target, group) in by_target {
        let mut outputs: Vec<usize> = Vec::new();
        for s in &group {
            outputs.push(s.user * t + s.domain);
            outputs.push(un + s.positive);
            outputs.extend(s.negatives.iter().map(|&i| un + i));
        }
        outputs.sort_unstable();
        outputs.dedup();
        let out = model.forward(tape, ctx, &outputs, target, fanout, rng)?;
        let cands = 1 + group[0].negatives.len();
        let mut user_rows = Vec::with_capacity(group.len() * cands);
        let mut item_rows = Vec::with_capacity(group.len() * cands);
        for s in &group {
            let u = out.rows(&[s.user * t + s.domain])?[0];
            user_rows.extend(std::iter::repeat_n(u, cands));
            item_rows.push(out.rows(&[un + s.positive])?[0]);
            item_rows.extend(out.rows(&s.negatives.iter().map(|&i| un + i).collect::<Vec<_>>())?);
        }
        let z = match model.config.score {
            Similarity::InnerProduct => out.reps,
            Similarity::Cosine => tape.l2_normalize_rows(out.reps),
        };
        parts.push(tape.indexed_dots(z, user_rows, item_rows, cands)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(&parts)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        step: usize,
        loss: f64,
        wall_ms: u64,
        variant: AblationVariant,
        seed: u64,
    },
    Refresh {
        step: usize,
        hyperedges: usize,
    },
    Checkpoint {
        step: usize,
        path: PathBuf,
    },
    Telemetry {
        step: usize,
        observed_negatives: usize,
    },
}

impl LogEvent {
    /// The event with wall-time zeroed, for determinism comparisons.
    pub fn without_wall_time(&self) -> LogEvent {
        match self {
            LogEvent::Step {
                step,
                loss,
                variant,
                seed,
                ..
            } => LogEvent::Step {
                step: *step,
                loss: *loss,
                wall_ms: 0,
                variant: *variant,
                seed: *seed,
            },
            other => other.clone(),
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub user_count: usize,
    pub item_count: usize,
    pub seed: u64,
    pub step: usize,
    pub params: Vec<(String, Tensor2)>,
    pub adam: AdamState,
    /// Current hyperedge-i sets keyed by (source item, target domain).
    pub hyperedges_i: Vec<((usize, usize), Vec<usize>)>,
}

const CHECKPOINT_FORMAT: &str = "h3trans-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    #[serde(flatten)]
    body: Checkpoint,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            body: self.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::from(e).in_file(path))?;
        std::fs::write(path, text).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")).in_file(path))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(
                Error::Checkpoint(format!("unknown format `{}`", file.format)).in_file(path),
            );
        }
        Ok(file.body)
    }

    /// Rebuild the model, refusing a config other than `expected`.
    pub fn model(&self, expected: Option<&ModelConfig>) -> Result<H3Model> {
        if let Some(cfg) = expected {
            if cfg != &self.config {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained with {:?}, run config asks for {:?}",
                    self.config, cfg
                )));
            }
        }
        let mut model = H3Model::new(self.config.clone(), self.user_count, self.item_count, 0)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` is {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(model)
    }
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub observed_negatives: usize,
    pub refreshed: bool,
}

/// Training state: model, optimizer, graph with hyperedges, step counter.
pub struct Trainer {
    pub model: H3Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub step: usize,
    graph: MultiDomainGraph,
    distances: Option<ItemDistances>,
    train: Dataset,
    observed: ObservedPairs,
    /// Where periodic and diagnostic checkpoints go.
    out_dir: Option<PathBuf>,
}

impl Trainer {
    /// Fresh model seeded from `config.seed`.
    pub fn new(train: Dataset, model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = H3Model::new(
            model_config,
            train.user_count,
            train.item_count,
            config.seed,
        )?;
        let adam = AdamState::new(&model.params, config.adam);
        let mut trainer = Trainer::assemble(train, model, adam, config, 0)?;
        if trainer.model.config.variant.hyper_i() == Some(RetrievalMethod::PathBased) {
            let mut rng = step_rng(trainer.config.seed, usize::MAX);
            let sets = build_hyperedge_sets(
                &trainer.graph,
                None,
                &trainer.model.config.retrieval,
                &mut rng,
            );
            trainer.graph.set_hyperedges_i(sets);
        }
        Ok(trainer)
    }

    /// Continue from a checkpoint; `config.seed` must match the checkpoint.
    pub fn resume(train: Dataset, checkpoint: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if checkpoint.seed != config.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} but run seed {}",
                checkpoint.seed, config.seed
            )));
        }
        let model = checkpoint.model(None)?;
        let mut adam = checkpoint.adam.clone();
        adam.config = config.adam;
        let mut trainer = Trainer::assemble(train, model, adam, config, checkpoint.step)?;
        trainer
            .graph
            .set_hyperedges_i(checkpoint.hyperedges_i.iter().cloned().collect());
        Ok(trainer)
    }

    fn assemble(
        train: Dataset,
        model: H3Model,
        adam: AdamState,
        config: TrainConfig,
        step: usize,
    ) -> Result<Self> {
        train.validate()?;
        if train.records.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if (train.user_count, train.item_count) != (model.user_count, model.item_count) {
            return Err(Error::Checkpoint(format!(
                "model covers {} users / {} items, data has {} / {}",
                model.user_count, model.item_count, train.user_count, train.item_count
            )));
        }
        let mut graph = MultiDomainGraph::build(&train);
        let variant = model.config.variant;
        if variant.has_hyper_u() {
            graph.build_hyperedges_u();
        }
        let distances = variant
            .distance_bias()
            .then(|| ItemDistances::new(&graph, model.config.d_max));
        let observed = ObservedPairs::new(&train);
        Ok(Trainer {
            model,
            adam,
            config,
            step,
            graph,
            distances,
            train,
            observed,
            out_dir: None,
        })
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn graph(&self) -> &MultiDomainGraph {
        &self.graph
    }

    pub fn distances(&self) -> Option<&ItemDistances> {
        self.distances.as_ref()
    }

    pub fn context(&self) -> ForwardContext<'_> {
        ForwardContext {
            graph: &self.graph,
            distances: self.distances.as_ref(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.train.records.len())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            user_count: self.model.user_count,
            item_count: self.model.item_count,
            seed: self.config.seed,
            step: self.step,
            params: self
                .model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam: self.adam.clone(),
            hyperedges_i: self
                .graph
                .hyperedges_i()
                .iter()
                .map(|(k, e)| (*k, similar_items(e)))
                .collect(),
        }
    }

    /// Rebuild embedding-based hyperedge-i from the current item embeddings.
    pub fn refresh_hyperedges(&mut self) -> usize {
        let reps = self.model.item_embeddings();
        let mut rng = step_rng(self.config.seed, usize::MAX);
        let sets = build_hyperedge_sets(
            &self.graph,
            Some(&reps),
            &self.model.config.retrieval,
            &mut rng,
        );
        let n = sets.len();
        self.graph.set_hyperedges_i(sets);
        n
    }

    /// Refresh (when due), sample, forward, backward and update once.
    pub fn step_once(&mut self) -> Result<StepReport> {
        let step = self.step;
        let cfg = &self.model.config;
        let refreshed = cfg.variant.hyper_i() == Some(RetrievalMethod::EmbeddingBased)
            && cfg.retrieval.refresh_due(step);
        if refreshed {
            self.refresh_hyperedges();
        }
        let mut rng = step_rng(self.config.seed, step);
        let batch = sample_batch(
            &self.train,
            &self.observed,
            self.config.batch_size,
            self.config.negatives,
            &mut rng,
        )?;
        let mut tape = Tape::new();
        let fanout = Fanout::Sample(self.model.config.neighbors);
        let ctx = ForwardContext {
            graph: &self.graph,
            distances: self.distances.as_ref(),
        };
        let scores = batch_scores(
            &self.model,
            &mut tape,
            ctx,
            &batch.samples,
            fanout,
            &mut rng,
        )?;
        let loss_var = infonce_on_tape(&mut tape, scores, self.model.config.tau)?;
        let loss = tape.value(loss_var).item();
        let grads = if loss.is_finite() {
            let g = tape.backward(loss_var)?;
            Some(tape.param_grads(&g, &self.model.params))
                .filter(|g| g.iter().all(Tensor2::is_finite))
        } else {
            None
        };
        let Some(grads) = grads else {
            return Err(self.abort(step));
        };
        self.adam.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(StepReport {
            step,
            loss,
            observed_negatives: batch.observed_negatives,
            refreshed,
        })
    }

    fn abort(&self, step: usize) -> Error {
        let checkpoint = self.out_dir.as_ref().and_then(|dir| {
            let path = dir.join(format!("diagnostic-step{step}.ckpt.json"));
            self.checkpoint().save(&path).ok().map(|_| path)
        });
        Error::NonFinite { step, checkpoint }
    }

    /// Train until `total_steps`, writing JSON log lines to `log`. Loss
    /// lines carry the mean loss since the previous loss line.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<Vec<LogEvent>> {
        let total = self.total_steps();
        self.run_until(total, log)
    }

    pub fn run_until(&mut self, until: usize, log: &mut dyn Write) -> Result<Vec<LogEvent>> {
        let mut events = Vec::new();
        let mut emit = |e: LogEvent, log: &mut dyn Write| -> Result<()> {
            writeln!(log, "{}", serde_json::to_string(&e)?)?;
            events.push(e);
            Ok(())
        };
        let mut window = Vec::new();
        let mut clock = Instant::now();
        while self.step < until {
            let report = self.step_once()?;
            if report.refreshed {
                emit(
                    LogEvent::Refresh {
                        step: report.step,
                        hyperedges: self.graph.hyperedges_i().len(),
                    },
                    log,
                )?;
            }
            if report.observed_negatives > 0 {
                emit(
                    LogEvent::Telemetry {
                        step: report.step,
                        observed_negatives: report.observed_negatives,
                    },
                    log,
                )?;
            }
            window.push(report.loss);
            let done = self.step;
            if done.is_multiple_of(self.config.log_every) || done == until {
                let loss = window.iter().sum::<f64>() / window.len() as f64;
                let wall_ms = clock.elapsed().as_millis() as u64;
                let (variant, seed) = (self.model.config.variant, self.config.seed);
                emit(
                    LogEvent::Step {
                        step: done,
                        loss,
                        wall_ms,
                        variant,
                        seed,
                    },
                    log,
                )?;
                window.clear();
                clock = Instant::now();
            }
            if self.config.checkpoint_every > 0 && done.is_multiple_of(self.config.checkpoint_every)
            {
                if let Some(dir) = &self.out_dir {
                    let path = dir.join(format!("step{done}.ckpt.json"));
                    self.checkpoint().save(&path)?;
                    emit(LogEvent::Checkpoint { step: done, path }, log)?;
                }
            }
        }
        Ok(events)
    }
}

fn similar_items(e: &crate::graph::Hyperedge) -> Vec<usize> {
    e.nodes[1..]
        .iter()
        .filter_map(|n| match n {
            crate::graph::NodeId::Item(i) => Some(*i),
            crate::graph::NodeId::User { .. } => None,
        })
        .collect()
}
