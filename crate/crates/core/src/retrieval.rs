//! Similar-item retrieval for hyperedge-i.
//!
//! For a source item `i` and a target domain `t`, pick up to `k` items of
//! `t` related to `i`, either by walking `i -> u^s -> u^t -> j` through
//! users active in both domains ([`path_based_candidates`]) or by exact
//! nearest-neighbor search over current item representations
//! ([`embedding_based_candidates`]).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::MultiDomainGraph;
use crate::numeric::{dot, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalMethod {
    PathBased,
    EmbeddingBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Similarity {
    InnerProduct,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub method: RetrievalMethod,
    /// Similar items per hyperedge.
    pub k: usize,
    /// Half-width of the click-time window for path-based walks.
    pub time_window: u64,
    /// Steps between embedding-based recomputations.
    pub refresh_interval: usize,
    pub similarity: Similarity,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            method: RetrievalMethod::EmbeddingBased,
            k: 20,
            time_window: 604_800,
            refresh_interval: 100,
            similarity: Similarity::InnerProduct,
        }
    }
}

impl RetrievalConfig {
    /// Embedding-based sets are rebuilt at step 0 and every `refresh_interval` steps.
    pub fn refresh_due(&self, step: usize) -> bool {
        self.method == RetrievalMethod::EmbeddingBased
            && step.is_multiple_of(self.refresh_interval.max(1))
    }
}

/// Items of `target` reached from `item` through a user who clicked
/// `item` in `source` and then, within `time_window` of that click, the
/// reached item in `target`. Each path contributes one copy, so frequently
/// co-clicked items are proportionally likelier; up to `k` distinct items
/// are drawn without replacement. `item` itself is never returned.
pub fn path_based_candidates<R: Rng>(
    graph: &MultiDomainGraph,
    item: usize,
    source: usize,
    target: usize,
    cfg: &RetrievalConfig,
    rng: &mut R,
) -> Vec<usize> {
    let counts = path_counts(graph, item, &[source], target, cfg.time_window);
    weighted_sample_distinct(counts, cfg.k, rng)
}

fn path_counts(
    graph: &MultiDomainGraph,
    item: usize,
    sources: &[usize],
    target: usize,
    window: u64,
) -> BTreeMap<usize, u64> {
    let t = graph.domains();
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for &(user_node, ts) in graph.item_users(item) {
        let (user, domain) = (user_node / t, user_node % t);
        if domain == target || !sources.contains(&domain) {
            continue;
        }
        for &(j, ts_j) in graph.user_items(user, target) {
            if j != item && ts_j.abs_diff(ts) <= window {
                *counts.entry(j).or_default() += 1;
            }
        }
    }
    counts
}

fn weighted_sample_distinct<R: Rng>(
    mut counts: BTreeMap<usize, u64>,
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut picked = Vec::with_capacity(k.min(counts.len()));
    while picked.len() < k && !counts.is_empty() {
        let total: u64 = counts.values().sum();
        let mut r = rng.random_range(0..total);
        let chosen = counts
            .iter()
            .find_map(|(&j, &c)| {
                if r < c {
                    Some(j)
                } else {
                    r -= c;
                    None
                }
            })
            .expect("r < total");
        counts.remove(&chosen);
        picked.push(chosen);
    }
    picked
}

/// The `k` items of `target_items` most similar to `query`, most similar
/// first, ties to the smaller id. `exclude` is skipped. `reps` rows are
/// indexed by item id.
pub fn embedding_based_candidates(
    reps: &Tensor2,
    target_items: &[usize],
    query: &[f64],
    exclude: Option<usize>,
    k: usize,
    similarity: Similarity,
) -> Vec<usize> {
    let qnorm = dot(query, query).sqrt();
    let mut scored: Vec<(f64, usize)> = target_items
        .iter()
        .filter(|&&j| Some(j) != exclude)
        .map(|&j| {
            let row = reps.row(j);
            let s = dot(query, row);
            let s = match similarity {
                Similarity::InnerProduct => s,
                Similarity::Cosine => {
                    let denom = qnorm * dot(row, row).sqrt();
                    if denom > 0.0 {
                        s / denom
                    } else {
                        0.0
                    }
                }
            };
            (s, j)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Similar-item sets for every (source item, target domain) key: one key
/// per item `i` of some domain `s` and every `t != s`. Path-based walks
/// start from every domain other than `t` that contains `i`.
pub fn build_hyperedge_sets<R: Rng>(
    graph: &MultiDomainGraph,
    item_reps: Option<&Tensor2>,
    cfg: &RetrievalConfig,
    rng: &mut R,
) -> BTreeMap<(usize, usize), Vec<usize>> {
    let t = graph.domains();
    let mut keys = std::collections::BTreeSet::new();
    for s in 0..t {
        for &i in graph.domain_items(s) {
            for target in (0..t).filter(|&x| x != s) {
                keys.insert((i, target));
            }
        }
    }
    keys.into_iter()
        .map(|(i, target)| {
            let similar = match (cfg.method, item_reps) {
                (RetrievalMethod::EmbeddingBased, Some(reps)) => embedding_based_candidates(
                    reps,
                    graph.domain_items(target),
                    reps.row(i),
                    Some(i),
                    cfg.k,
                    cfg.similarity,
                ),
                (RetrievalMethod::EmbeddingBased, None) => Vec::new(),
                (RetrievalMethod::PathBased, _) => {
                    let sources: Vec<usize> = (0..t)
                        .filter(|&s| s != target && graph.domain_has_item(s, i))
                        .collect();
                    weighted_sample_distinct(
                        path_counts(graph, i, &sources, target, cfg.time_window),
                        cfg.k,
                        rng,
                    )
                }
            };
            ((i, target), similar)
        })
        .collect()
}

/// Build and install hyperedge-i on `graph`.
pub fn build_hyperedges_i<R: Rng>(
    graph: &mut MultiDomainGraph,
    item_reps: Option<&Tensor2>,
    cfg: &RetrievalConfig,
    rng: &mut R,
) {
    let sets = build_hyperedge_sets(graph, item_reps, cfg, rng);
    graph.set_hyperedges_i(sets);
}
