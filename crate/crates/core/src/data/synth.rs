//! Latent-factor generator for multi-domain click data.
//!
//! Each user has a shared factor `g` and, per domain `m`, a private offset
//! `e_m`; the domain-`m` preference is `rho * g + (1 - rho) * e_m`,
//! normalized. Items belong to one of `latent_dim` categories and carry a
//! noisy one-hot factor, so category `c` means the same thing in every
//! domain. Clicks are drawn with replacement from a softmax over
//! preference/item inner products. Activity follows a power law across
//! users with a per-domain jitter, so some users are dense in one domain
//! and sparse in another.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, InteractionRecord};
use crate::error::{Error, Result};

/// Softmax inverse temperature over preference/item inner products.
const SHARPNESS: f64 = 10.0;
/// Standard deviation of the non-category part of item factors.
const ITEM_NOISE: f64 = 0.2;
/// Power-law exponent of user activity weights.
const ACTIVITY_EXPONENT: f64 = 1.0;
/// Log-normal spread of the per-domain activity jitter.
const DOMAIN_JITTER: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub domains: usize,
    pub users: usize,
    pub items_per_domain: usize,
    pub overlap_fraction: f64,
    pub interactions_per_user: usize,
    pub latent_dim: usize,
    pub domain_correlation: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            domains: 3,
            users: 300,
            items_per_domain: 200,
            overlap_fraction: 0.1,
            interactions_per_user: 10,
            latent_dim: 8,
            domain_correlation: 0.8,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("T", self.domains),
            ("users", self.users),
            ("items_per_domain", self.items_per_domain),
            ("interactions_per_user", self.interactions_per_user),
            ("latent_dim", self.latent_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!(
                "overlap_fraction {} outside [0, 1]",
                self.overlap_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.domain_correlation) {
            return Err(Error::Config(format!(
                "domain_correlation {} outside [0, 1]",
                self.domain_correlation
            )));
        }
        if self.interactions_per_user > self.items_per_domain {
            return Err(Error::Config(format!(
                "interactions_per_user {} exceeds items_per_domain {}",
                self.interactions_per_user, self.items_per_domain
            )));
        }
        Ok(())
    }
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    /// `user_factors[u][m]`: unit-length preference of user `u` in domain `m`.
    pub user_factors: Vec<Vec<Vec<f64>>>,
    pub item_factors: Vec<Vec<f64>>,
    pub item_category: Vec<usize>,
    /// Item ids of each domain in generation order.
    pub domain_items: Vec<Vec<usize>>,
}

pub fn generate_synthetic(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    generate_synthetic_world(cfg, seed).map(|(ds, _)| ds)
}

/// Generate a dataset and the latent structure that produced it. The
/// record count is exactly `users * interactions_per_user * T`; duplicate
/// clicks are kept (callers deduplicate).
pub fn generate_synthetic_world(cfg: &GenConfig, seed: u64) -> Result<(Dataset, SyntheticWorld)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.domains;
    let r = cfg.latent_dim;

    let domain_items = layout_items(cfg);
    let item_count = domain_items.iter().flatten().max().map_or(0, |&m| m + 1);

    let mut item_category = Vec::with_capacity(item_count);
    let mut item_factors = Vec::with_capacity(item_count);
    for _ in 0..item_count {
        let c = rng.random_range(0..r);
        let mut f: Vec<f64> = (0..r)
            .map(|_| ITEM_NOISE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        f[c] += 1.0;
        item_category.push(c);
        item_factors.push(f);
    }

    let rho = cfg.domain_correlation;
    let mut user_factors = Vec::with_capacity(cfg.users);
    for _ in 0..cfg.users {
        let shared = gaussian_vec(&mut rng, r);
        let per_domain: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let offset = gaussian_vec(&mut rng, r);
                let mixed: Vec<f64> = shared
                    .iter()
                    .zip(&offset)
                    .map(|(g, e)| rho * g + (1.0 - rho) * e)
                    .collect();
                normalized(mixed)
            })
            .collect();
        user_factors.push(per_domain);
    }

    let counts = allocate_counts(cfg, &mut rng);

    let mut records = Vec::with_capacity(cfg.users * cfg.interactions_per_user * t);
    for (u, per_domain) in counts.iter().enumerate() {
        let mut clicks = Vec::new();
        for (m, &n) in per_domain.iter().enumerate() {
            let items = &domain_items[m];
            let weights: Vec<f64> = {
                let scores: Vec<f64> = items
                    .iter()
                    .map(|&i| {
                        SHARPNESS * crate::numeric::dot(&user_factors[u][m], &item_factors[i])
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                scores.iter().map(|s| (s - max).exp()).collect()
            };
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::Data(e.to_string()))?;
            for _ in 0..n {
                clicks.push((m, items[dist.sample(&mut rng)]));
            }
        }
        clicks.shuffle(&mut rng);
        for (ts, (domain, item)) in clicks.into_iter().enumerate() {
            records.push(InteractionRecord {
                user: u,
                item,
                domain,
                timestamp: ts as u64,
                rating: None,
            });
        }
    }

    let mut dataset = Dataset::from_records(records, t, cfg.users, item_count)?;
    // Every generated item is a candidate of its domain, clicked or not.
    dataset.per_domain_items = domain_items
        .iter()
        .map(|items| {
            let mut v = items.clone();
            v.sort_unstable();
            v
        })
        .collect();
    Ok((
        dataset,
        SyntheticWorld {
            user_factors,
            item_factors,
            item_category,
            domain_items,
        },
    ))
}

// Domain m >= 1 re-uses the last `shared` items of domain m - 1.
fn layout_items(cfg: &GenConfig) -> Vec<Vec<usize>> {
    let n = cfg.items_per_domain;
    let shared = ((cfg.overlap_fraction * n as f64).floor() as usize).min(n);
    let mut next = 0;
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(cfg.domains);
    for m in 0..cfg.domains {
        let mut items = Vec::with_capacity(n);
        if m > 0 {
            let prev = &out[m - 1];
            items.extend_from_slice(&prev[n - shared..]);
        }
        while items.len() < n {
            items.push(next);
            next += 1;
        }
        out.push(items);
    }
    out
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

/// Per-(user, domain) click counts summing to `users * interactions_per_user * T`,
/// each in `1..=items_per_domain`, proportional to power-law activity.
fn allocate_counts(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (users, t) = (cfg.users, cfg.domains);
    let cap = cfg.items_per_domain;
    let total = users * cfg.interactions_per_user * t;

    let mut ranks: Vec<usize> = (0..users).collect();
    ranks.shuffle(rng);
    let mut weights = Vec::with_capacity(users * t);
    for &rank in &ranks {
        let base = ((rank + 1) as f64).powf(-ACTIVITY_EXPONENT);
        for _ in 0..t {
            let jitter = (DOMAIN_JITTER * rng.sample::<f64, _>(StandardNormal)).exp();
            weights.push(base * jitter);
        }
    }
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas
        .iter()
        .map(|q| (q.floor() as usize).clamp(1, cap))
        .collect();

    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    while assigned < total {
        for &i in &order {
            if assigned == total {
                break;
            }
            if counts[i] < cap {
                counts[i] += 1;
                assigned += 1;
            }
        }
    }
    while assigned > total {
        for &i in order.iter().rev() {
            if assigned == total {
                break;
            }
            if counts[i] > 1 {
                counts[i] -= 1;
                assigned -= 1;
            }
        }
    }
    counts.chunks(t).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            domains: 2,
            users: 20,
            items_per_domain: 30,
            interactions_per_user: 5,
            ..GenConfig::default()
        }
    }

    #[test]
    fn same_seed_is_reproducible() {
        let a = generate_synthetic(&small(), 7).unwrap();
        let b = generate_synthetic(&small(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&small(), 8).unwrap());
    }

    #[test]
    fn record_count_is_exact_before_dedup() {
        let cfg = small();
        let ds = generate_synthetic(&cfg, 1).unwrap();
        assert_eq!(
            ds.records.len(),
            cfg.users * cfg.interactions_per_user * cfg.domains
        );
    }

    #[test]
    fn too_many_interactions_is_rejected() {
        let cfg = GenConfig {
            interactions_per_user: 31,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn full_correlation_gives_identical_domain_factors() {
        let cfg = GenConfig {
            domain_correlation: 1.0,
            domains: 3,
            ..small()
        };
        let (_, world) = generate_synthetic_world(&cfg, 3).unwrap();
        for per_domain in &world.user_factors {
            assert!(per_domain.iter().all(|f| f == &per_domain[0]));
        }
    }

    #[test]
    fn overlap_shares_items_between_consecutive_domains() {
        let cfg = GenConfig {
            overlap_fraction: 0.2,
            items_per_domain: 10,
            domains: 3,
            ..small()
        };
        let items = layout_items(&cfg);
        assert_eq!(items[1][..2], items[0][8..]);
        assert_eq!(items[2][..2], items[1][8..]);
        let total = items.iter().flatten().max().unwrap() + 1;
        assert_eq!(total, 10 + 2 * 8);
    }
}
