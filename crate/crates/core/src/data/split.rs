use std::collections::HashMap;

use super::{Dataset, InteractionRecord};

/// Training data plus one held-out interaction per eligible (user, domain).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    /// Sorted by (domain, user).
    pub test: Vec<InteractionRecord>,
}

/// Leave-one-out split per (user, domain).
///
/// Every pair with at least two interactions gives up its latest one
/// (ties on timestamp go to the larger item id) as the test record.
/// Singletons stay in training. Item sets and id spaces are inherited from
/// `dataset`, so a held-out item always remains a candidate of its domain.
pub fn leave_one_out_split(dataset: &Dataset) -> SplitDataset {
    let mut latest: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for (idx, r) in dataset.records.iter().enumerate() {
        let entry = latest.entry((r.user, r.domain)).or_insert((idx, 0));
        entry.1 += 1;
        let best = &dataset.records[entry.0];
        if (r.timestamp, r.item) > (best.timestamp, best.item) {
            entry.0 = idx;
        }
    }
    let mut held_out = vec![false; dataset.records.len()];
    for &(idx, count) in latest.values() {
        if count >= 2 {
            held_out[idx] = true;
        }
    }
    let mut train = Vec::with_capacity(dataset.records.len());
    let mut test = Vec::new();
    for (r, out) in dataset.records.iter().zip(held_out) {
        if out {
            test.push(*r);
        } else {
            train.push(*r);
        }
    }
    test.sort_by_key(|r| (r.domain, r.user));
    SplitDataset {
        train: Dataset {
            records: train,
            domains: dataset.domains,
            user_count: dataset.user_count,
            item_count: dataset.item_count,
            per_domain_items: dataset.per_domain_items.clone(),
        },
        test,
    }
}
