use std::collections::HashMap;

use super::parse::RawRecord;

/// Keep records rated at least `threshold`; unrated (click) records pass.
pub fn binarize(records: &[RawRecord], threshold: u8) -> Vec<RawRecord> {
    records
        .iter()
        .filter(|r| r.rating.is_none_or(|x| x >= threshold))
        .cloned()
        .collect()
}

/// Drop repeated (user, item, domain) triples, keeping the earliest
/// timestamp at the position of the first occurrence.
pub fn dedup_earliest(records: &[RawRecord]) -> Vec<RawRecord> {
    let mut first: HashMap<(&str, &str, usize), usize> = HashMap::new();
    let mut out: Vec<RawRecord> = Vec::with_capacity(records.len());
    for r in records {
        match first.get(&(r.user.as_str(), r.item.as_str(), r.domain)) {
            Some(&pos) => {
                if r.timestamp < out[pos].timestamp {
                    out[pos] = r.clone();
                }
            }
            None => {
                first.insert((&r.user, &r.item, r.domain), out.len());
                out.push(r.clone());
            }
        }
    }
    out
}

/// Maximal k-core of the user-item multigraph: repeatedly drop every user
/// with fewer than `k` interactions (summed over domains) and every item
/// with fewer than `k` interactions until nothing changes. Input order of
/// the surviving records is kept.
pub fn k_core_filter(records: &[RawRecord], k: usize) -> Vec<RawRecord> {
    let mut current: Vec<RawRecord> = records.to_vec();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &current {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|r| users[r.user.as_str()] >= k && items[r.item.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            return current;
        }
        current = current
            .into_iter()
            .zip(keep)
            .filter_map(|(r, k)| k.then_some(r))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: &str, item: &str, rating: Option<u8>) -> RawRecord {
        RawRecord {
            user: user.into(),
            item: item.into(),
            domain: 0,
            timestamp: 0,
            rating,
        }
    }

    #[test]
    fn binarize_keeps_four_and_above_and_unrated() {
        let recs = [
            rec("a", "x", Some(4)),
            rec("a", "y", Some(3)),
            rec("a", "z", None),
            rec("a", "w", Some(5)),
        ];
        let kept: Vec<_> = binarize(&recs, 4).into_iter().map(|r| r.item).collect();
        assert_eq!(kept, ["x", "z", "w"]);
    }

    #[test]
    fn k_core_is_identity_when_everything_qualifies() {
        let mut recs = Vec::new();
        for u in 0..3 {
            for i in 0..3 {
                recs.push(rec(&format!("u{u}"), &format!("i{i}"), None));
            }
        }
        assert_eq!(k_core_filter(&recs, 3), recs);
    }

    #[test]
    fn sparse_user_is_removed_but_partners_survive() {
        // u0..u5 each click i0..i5 (6 each); `lone` clicks i0..i3 (4 < 5).
        let mut recs = Vec::new();
        for u in 0..6 {
            for i in 0..6 {
                recs.push(rec(&format!("u{u}"), &format!("i{i}"), None));
            }
        }
        for i in 0..4 {
            recs.push(rec("lone", &format!("i{i}"), None));
        }
        let out = k_core_filter(&recs, 5);
        assert_eq!(out.len(), 36);
        assert!(out.iter().all(|r| r.user != "lone"));
    }

    #[test]
    fn empty_core_is_allowed() {
        let recs = [rec("a", "x", None)];
        assert!(k_core_filter(&recs, 2).is_empty());
    }
}
