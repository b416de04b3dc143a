//! Interaction datasets: parsing, filtering, id remapping, the
//! leave-one-out split, and a synthetic multi-domain generator.

mod filter;
mod io;
mod parse;
mod split;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{binarize, dedup_earliest, k_core_filter};
pub use io::{read_dataset_dir, read_mapping, write_dataset_dir, write_mapping, DatasetFiles};
pub use parse::{parse_interactions, InputFormat, RawRecord};
pub use split::{leave_one_out_split, SplitDataset};
pub use synth::{generate_synthetic, generate_synthetic_world, GenConfig, SyntheticWorld};

/// One click event after id remapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: usize,
    pub item: usize,
    pub domain: usize,
    pub timestamp: u64,
    pub rating: Option<u8>,
}

/// Interactions over `domains` domains with dense user and item ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<InteractionRecord>,
    pub domains: usize,
    pub user_count: usize,
    pub item_count: usize,
    /// Sorted item ids observed in each domain.
    pub per_domain_items: Vec<Vec<usize>>,
}

impl Dataset {
    /// Assemble a dataset, deriving the per-domain item sets from `records`.
    pub fn from_records(
        records: Vec<InteractionRecord>,
        domains: usize,
        user_count: usize,
        item_count: usize,
    ) -> Result<Self> {
        let mut per_domain_items = vec![Vec::new(); domains];
        for r in &records {
            if r.domain >= domains || r.user >= user_count || r.item >= item_count {
                return Err(Error::Data(format!(
                    "record {r:?} outside {domains} domains / {user_count} users / {item_count} items"
                )));
            }
            per_domain_items[r.domain].push(r.item);
        }
        for items in &mut per_domain_items {
            items.sort_unstable();
            items.dedup();
        }
        Ok(Dataset {
            records,
            domains,
            user_count,
            item_count,
            per_domain_items,
        })
    }

    pub fn domain_has_item(&self, domain: usize, item: usize) -> bool {
        self.per_domain_items[domain].binary_search(&item).is_ok()
    }

    /// Domains in which `item` occurs.
    pub fn item_domains(&self, item: usize) -> Vec<usize> {
        (0..self.domains)
            .filter(|&m| self.domain_has_item(m, item))
            .collect()
    }

    /// Drop repeated (user, item, domain) triples, keeping the earliest
    /// timestamp at the first occurrence's position.
    pub fn dedup(&mut self) {
        let mut first: HashMap<(usize, usize, usize), usize> = HashMap::new();
        let mut out: Vec<InteractionRecord> = Vec::with_capacity(self.records.len());
        for r in &self.records {
            match first.get(&(r.user, r.item, r.domain)) {
                Some(&pos) if r.timestamp < out[pos].timestamp => out[pos] = *r,
                Some(_) => {}
                None => {
                    first.insert((r.user, r.item, r.domain), out.len());
                    out.push(*r);
                }
            }
        }
        self.records = out;
    }

    /// Keep only domains `0..domains`. Ids are unchanged, so items of the
    /// dropped domains remain as isolated ids.
    pub fn restrict_domains(&self, domains: usize) -> Dataset {
        let domains = domains.min(self.domains);
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| r.domain < domains)
                .copied()
                .collect(),
            domains,
            user_count: self.user_count,
            item_count: self.item_count,
            per_domain_items: self.per_domain_items[..domains].to_vec(),
        }
    }

    /// Interaction count per user summed over all domains.
    pub fn user_activity(&self) -> Vec<usize> {
        let mut counts = vec![0; self.user_count];
        for r in &self.records {
            counts[r.user] += 1;
        }
        counts
    }

    /// Check the structural invariants; used by loaders and tests.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if r.domain >= self.domains || r.user >= self.user_count || r.item >= self.item_count {
                return Err(Error::Data(format!("record {r:?} out of range")));
            }
            if !self.domain_has_item(r.domain, r.item) {
                return Err(Error::Data(format!(
                    "item {} missing from domain {} item set",
                    r.item, r.domain
                )));
            }
            if !seen.insert((r.user, r.item, r.domain)) {
                return Err(Error::Data(format!(
                    "duplicate interaction user {} item {} domain {}",
                    r.user, r.item, r.domain
                )));
            }
        }
        Ok(())
    }
}

/// Original-to-dense id tables produced by [`remap_ids`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

/// Map string ids to dense ids in first-appearance order and build the
/// dataset. Duplicate (user, item, domain) triples keep their earliest
/// timestamp. `domains` defaults to one past the largest domain index.
pub fn remap_ids(records: &[RawRecord], domains: Option<usize>) -> Result<(Dataset, IdMaps)> {
    if records.is_empty() {
        return Err(Error::Data("cannot remap an empty record list".into()));
    }
    let records = dedup_earliest(records);
    let domains =
        domains.unwrap_or_else(|| records.iter().map(|r| r.domain + 1).max().unwrap_or(0));
    let mut maps = IdMaps::default();
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in &records {
        let user = *user_ids.entry(&r.user).or_insert_with(|| {
            maps.users.push(r.user.clone());
            maps.users.len() - 1
        });
        let item = *item_ids.entry(&r.item).or_insert_with(|| {
            maps.items.push(r.item.clone());
            maps.items.len() - 1
        });
        out.push(InteractionRecord {
            user,
            item,
            domain: r.domain,
            timestamp: r.timestamp,
            rating: r.rating,
        });
    }
    let dataset = Dataset::from_records(out, domains, maps.users.len(), maps.items.len())?;
    Ok((dataset, maps))
}
