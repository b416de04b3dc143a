//! Leave-one-out all-ranking evaluation.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitDataset};
use crate::error::{Error, Result};
use crate::model::{predict, ForwardContext, H3Model};
use crate::numeric::Tensor2;

/// Number of activity groups.
pub const GROUPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    pub user: usize,
    pub domain: usize,
    pub held_out_item: usize,
    /// 1-based position among all candidates.
    pub rank: usize,
    pub candidates: usize,
}

/// Rank of `scores[target]`: one plus the number of other entries scoring
/// at least as high, so ties count against the target.
pub fn pessimistic_rank(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| j != target && x >= s)
        .count()
}

/// Candidates for `(user, domain)`: the domain's items minus those the user
/// clicked there in training, with the held-out item always kept.
pub fn candidate_items(
    train: &Dataset,
    user_items: &BTreeSet<usize>,
    domain: usize,
    held_out: usize,
) -> Result<Vec<usize>> {
    if !train.domain_has_item(domain, held_out) {
        return Err(Error::Protocol(format!(
            "held-out item {held_out} is not an item of domain {domain}"
        )));
    }
    Ok(train.per_domain_items[domain]
        .iter()
        .copied()
        .filter(|i| *i == held_out || !user_items.contains(i))
        .collect())
}

/// Rank one held-out item given final node representations `reps` (rows
/// are dense node indices).
pub fn rank_all(
    model: &H3Model,
    reps: &Tensor2,
    train: &Dataset,
    user_items: &BTreeSet<usize>,
    user: usize,
    domain: usize,
    held_out: usize,
) -> Result<RankResult> {
    let t = train.domains;
    let un = train.user_count * t;
    let cands = candidate_items(train, user_items, domain, held_out)?;
    let zu = reps.row(user * t + domain);
    let scores: Vec<f64> = cands
        .iter()
        .map(|&i| predict(zu, reps.row(un + i), model.config.score))
        .collect();
    let at = cands.binary_search(&held_out).expect("held-out item kept");
    Ok(RankResult {
        user,
        domain,
        held_out_item: held_out,
        rank: pessimistic_rank(&scores, at),
        candidates: cands.len(),
    })
}

fn mean_of(results: &[RankResult], f: impl Fn(&RankResult) -> f64) -> Option<f64> {
    (!results.is_empty()).then(|| results.iter().map(f).sum::<f64>() / results.len() as f64)
}

/// Fraction of results with rank at most `k`; `None` for no results.
pub fn hr_at_k(results: &[RankResult], k: usize) -> Option<f64> {
    mean_of(results, |r| if r.rank <= k { 1.0 } else { 0.0 })
}

/// Mean reciprocal rank without cutoff.
pub fn mrr(results: &[RankResult]) -> Option<f64> {
    mean_of(results, |r| 1.0 / r.rank as f64)
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` within the cutoff.
pub fn ndcg_at_k(results: &[RankResult], k: usize) -> Option<f64> {
    mean_of(results, |r| {
        if r.rank <= k {
            1.0 / ((r.rank + 1) as f64).log2()
        } else {
            0.0
        }
    })
}

/// Activity group (1..=5) of every user: quintiles of total training
/// clicks, ascending, ties by user id.
pub fn activity_groups(train: &Dataset) -> Vec<u8> {
    let activity = train.user_activity();
    let n = activity.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&u| (activity[u], u));
    let mut group = vec![0u8; n];
    for (pos, &u) in order.iter().enumerate() {
        group[u] = (pos * GROUPS / n) as u8 + 1;
    }
    group
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    HR,
    NDCG,
    MRR,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::HR => "HR",
            Metric::NDCG => "NDCG",
            Metric::MRR => "MRR",
        })
    }
}

/// `None` is the whole domain; `Some(g)` is activity group `g` (1..=5).
pub type Group = Option<u8>;

fn group_label(g: Group) -> String {
    g.map_or_else(|| "ALL".to_string(), |g| format!("G{g}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub domain: usize,
    pub group: Group,
    pub metric: Metric,
    /// Cutoff; `None` for MRR.
    pub k: Option<usize>,
    /// `None` when the row covers no test records.
    pub value: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn from_results(
        results: &[RankResult],
        domains: usize,
        groups: &[u8],
        ks: &[usize],
    ) -> Self {
        let mut rows = Vec::new();
        for m in 0..domains {
            let in_domain: Vec<RankResult> =
                results.iter().filter(|r| r.domain == m).copied().collect();
            let scopes = std::iter::once(None).chain((1..=GROUPS as u8).map(Some));
            for g in scopes {
                let subset: Vec<RankResult> = in_domain
                    .iter()
                    .filter(|r| g.is_none_or(|g| groups[r.user] == g))
                    .copied()
                    .collect();
                let count = subset.len();
                rows.push(MetricRow {
                    domain: m,
                    group: g,
                    metric: Metric::MRR,
                    k: None,
                    value: mrr(&subset),
                    count,
                });
                for &k in ks {
                    rows.push(MetricRow {
                        domain: m,
                        group: g,
                        metric: Metric::HR,
                        k: Some(k),
                        value: hr_at_k(&subset, k),
                        count,
                    });
                    rows.push(MetricRow {
                        domain: m,
                        group: g,
                        metric: Metric::NDCG,
                        k: Some(k),
                        value: ndcg_at_k(&subset, k),
                        count,
                    });
                }
            }
        }
        MetricsTable { rows }
    }

    pub fn get(
        &self,
        domain: usize,
        group: Group,
        metric: Metric,
        k: Option<usize>,
    ) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.domain == domain && r.group == group && r.metric == metric && r.k == k)
            .and_then(|r| r.value)
    }

    pub fn count(&self, domain: usize, group: Group) -> usize {
        self.rows
            .iter()
            .find(|r| r.domain == domain && r.group == group)
            .map_or(0, |r| r.count)
    }

    /// Columns `domain group metric K value count`; absent values print `NA`
    /// and MRR has K `-`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("domain\tgroup\tmetric\tK\tvalue\tcount\n");
        for r in &self.rows {
            let k = r.k.map_or_else(|| "-".to_string(), |k| k.to_string());
            let v = r
                .value
                .map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{k}\t{v}\t{}",
                r.domain,
                group_label(r.group),
                r.metric,
                r.count
            );
        }
        out
    }

    /// One JSON object per row.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let line = serde_json::json!({
                "domain": r.domain,
                "group": group_label(r.group),
                "metric": r.metric.to_string(),
                "k": r.k,
                "value": r.value,
                "count": r.count,
            });
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: vec![20, 50] }
    }
}

/// Rank every test record with full-neighborhood representations and
/// aggregate per domain and activity group.
pub fn evaluate(
    model: &H3Model,
    ctx: ForwardContext<'_>,
    split: &SplitDataset,
    cfg: &EvalConfig,
) -> Result<(MetricsTable, Vec<RankResult>)> {
    let train = &split.train;
    let t = train.domains;
    let mut user_items: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); train.user_count * t];
    for r in &train.records {
        user_items[r.user * t + r.domain].insert(r.item);
    }
    let per_target = model.config.variant.hyper_i().is_some();
    let mut results = Vec::with_capacity(split.test.len());
    let mut cached: Option<(usize, Tensor2)> = None;
    for r in &split.test {
        let target = if per_target { r.domain } else { 0 };
        if cached.as_ref().is_none_or(|(m, _)| *m != target) {
            cached = Some((target, model.represent_all(ctx, target)?));
        }
        let reps = &cached.as_ref().expect("cached").1;
        results.push(rank_all(
            model,
            reps,
            train,
            &user_items[r.user * t + r.domain],
            r.user,
            r.domain,
            r.item,
        )?);
    }
    let groups = activity_groups(train);
    Ok((
        MetricsTable::from_results(&results, t, &groups, &cfg.ks),
        results,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(ranks: &[usize]) -> Vec<RankResult> {
        ranks
            .iter()
            .map(|&rank| RankResult {
                user: 0,
                domain: 0,
                held_out_item: 0,
                rank,
                candidates: 100,
            })
            .collect()
    }

    #[test]
    fn unique_max_ranks_first_and_ties_are_pessimistic() {
        assert_eq!(pessimistic_rank(&[0.1, 0.9, 0.3], 1), 1);
        assert_eq!(pessimistic_rank(&[0.9, 0.9, 0.3], 1), 2);
    }

    #[test]
    fn closed_form_metrics() {
        assert_eq!(hr_at_k(&res(&[1, 30]), 20), Some(0.5));
        assert_eq!(mrr(&res(&[1, 2])), Some(0.75));
        assert!((ndcg_at_k(&res(&[2]), 20).unwrap() - 0.630_929_753_571_457_4).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&res(&[25]), 20), Some(0.0));
        assert_eq!(hr_at_k(&[], 20), None);
    }

    #[test]
    fn empty_domain_is_absent_in_tsv() {
        let table = MetricsTable::from_results(&res(&[1]), 2, &[1], &[20]);
        assert_eq!(table.get(1, None, Metric::HR, Some(20)), None);
        assert_eq!(table.get(0, None, Metric::HR, Some(20)), Some(1.0));
        assert!(table.to_tsv().contains("1\tALL\tHR\t20\tNA\t0"));
    }
}
