//! The unified multi-domain graph.
//!
//! Every user owns one node per domain (`T` nodes in total, even where the
//! user never clicked) and every item owns exactly one node shared by all
//! domains. Ordinary edges join `UserNode(u, m)` to `ItemNode(i)` for each
//! training click of `u` on `i` in domain `m`. Hyperedges sit on top:
//! hyperedge-u joins the `T` nodes of one user, hyperedge-i joins a source
//! item with similar items of a target domain.
//!
//! Internally nodes are dense indices: user node `(u, m)` is `u * T + m`
//! and item `i` is `|U| * T + i`.

mod distance;
mod dump;
mod hyperedge;

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::data::Dataset;

pub use distance::{shortest_path_distances, DistanceMatrix, ItemDistances};
pub use dump::{read_graph_dump, write_graph_dump};
pub use hyperedge::{Hyperedge, HyperedgeKind, HyperedgeOwner, IncidenceView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    User { user: usize, domain: usize },
    Item(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainGraph {
    domains: usize,
    user_count: usize,
    item_count: usize,
    /// Per user node: (item, timestamp), sorted by item.
    user_adj: Vec<Vec<(usize, u64)>>,
    /// Per item: (user node index, timestamp), sorted by node index.
    item_adj: Vec<Vec<(usize, u64)>>,
    per_domain_items: Vec<Vec<usize>>,
    hyperedges_u: Vec<Hyperedge>,
    hyperedges_i: BTreeMap<(usize, usize), Hyperedge>,
}

impl MultiDomainGraph {
    /// Build nodes and typed edges from training interactions. Hyperedges
    /// are added separately.
    pub fn build(train: &Dataset) -> Self {
        let t = train.domains;
        let mut user_adj = vec![Vec::new(); train.user_count * t];
        let mut item_adj = vec![Vec::new(); train.item_count];
        for r in &train.records {
            let un = r.user * t + r.domain;
            user_adj[un].push((r.item, r.timestamp));
            item_adj[r.item].push((un, r.timestamp));
        }
        for list in user_adj.iter_mut().chain(item_adj.iter_mut()) {
            list.sort_unstable();
        }
        MultiDomainGraph {
            domains: t,
            user_count: train.user_count,
            item_count: train.item_count,
            user_adj,
            item_adj,
            per_domain_items: train.per_domain_items.clone(),
            hyperedges_u: Vec::new(),
            hyperedges_i: BTreeMap::new(),
        }
    }

    pub fn domains(&self) -> usize {
        self.domains
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn user_node_count(&self) -> usize {
        self.user_count * self.domains
    }

    pub fn node_count(&self) -> usize {
        self.user_node_count() + self.item_count
    }

    pub fn domain_items(&self, domain: usize) -> &[usize] {
        &self.per_domain_items[domain]
    }

    pub fn domain_has_item(&self, domain: usize, item: usize) -> bool {
        self.per_domain_items[domain].binary_search(&item).is_ok()
    }

    pub fn index(&self, node: NodeId) -> usize {
        match node {
            NodeId::User { user, domain } => user * self.domains + domain,
            NodeId::Item(i) => self.user_node_count() + i,
        }
    }

    pub fn node(&self, index: usize) -> NodeId {
        let un = self.user_node_count();
        if index < un {
            NodeId::User {
                user: index / self.domains,
                domain: index % self.domains,
            }
        } else {
            NodeId::Item(index - un)
        }
    }

    pub fn is_user_index(&self, index: usize) -> bool {
        index < self.user_node_count()
    }

    /// Items clicked by user node `(user, domain)` with click timestamps.
    pub fn user_items(&self, user: usize, domain: usize) -> &[(usize, u64)] {
        &self.user_adj[user * self.domains + domain]
    }

    /// User nodes (dense indices) that clicked `item`, with timestamps.
    pub fn item_users(&self, item: usize) -> &[(usize, u64)] {
        &self.item_adj[item]
    }

    pub fn degree(&self, index: usize) -> usize {
        let un = self.user_node_count();
        if index < un {
            self.user_adj[index].len()
        } else {
            self.item_adj[index - un].len()
        }
    }

    /// Neighbor node indices in adjacency order.
    pub fn neighbor_indices(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        let un = self.user_node_count();
        let (users, items): (&[(usize, u64)], &[(usize, u64)]) = if index < un {
            (&[], &self.user_adj[index])
        } else {
            (&self.item_adj[index - un], &[])
        };
        users
            .iter()
            .map(|&(n, _)| n)
            .chain(items.iter().map(move |&(i, _)| un + i))
    }

    pub fn neighbors(&self, node: NodeId) -> Vec<NodeId> {
        self.neighbor_indices(self.index(node))
            .map(|i| self.node(i))
            .collect()
    }

    /// Up to `n` neighbors of node `index`: all of them in adjacency order
    /// when the degree is at most `n`, otherwise a uniform sample without
    /// replacement in sampled order.
    pub fn sample_neighbor_indices<R: Rng>(
        &self,
        index: usize,
        n: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        let all: Vec<usize> = self.neighbor_indices(index).collect();
        if all.len() <= n {
            return all;
        }
        index::sample(rng, all.len(), n)
            .into_iter()
            .map(|k| all[k])
            .collect()
    }

    pub fn sample_neighbors<R: Rng>(&self, node: NodeId, n: usize, rng: &mut R) -> Vec<NodeId> {
        self.sample_neighbor_indices(self.index(node), n, rng)
            .into_iter()
            .map(|i| self.node(i))
            .collect()
    }

    /// Add one hyperedge-u per user, nodes in domain order. Replaces any
    /// existing hyperedge-u set.
    pub fn build_hyperedges_u(&mut self) {
        self.hyperedges_u = (0..self.user_count)
            .map(|u| Hyperedge {
                kind: HyperedgeKind::HyperU,
                owner: HyperedgeOwner::User(u),
                nodes: (0..self.domains)
                    .map(|m| NodeId::User { user: u, domain: m })
                    .collect(),
            })
            .collect();
    }

    pub fn hyperedges_u(&self) -> &[Hyperedge] {
        &self.hyperedges_u
    }

    pub fn hyperedges_i(&self) -> &BTreeMap<(usize, usize), Hyperedge> {
        &self.hyperedges_i
    }

    /// The hyperedge-i of source `item` towards `target` domain.
    pub fn hyperedge_i(&self, item: usize, target: usize) -> Option<&Hyperedge> {
        self.hyperedges_i.get(&(item, target))
    }

    /// Replace the hyperedge-i set with `[item] ++ similar` per key.
    pub fn set_hyperedges_i(&mut self, sets: BTreeMap<(usize, usize), Vec<usize>>) {
        self.hyperedges_i = sets
            .into_iter()
            .map(|((item, target), similar)| {
                let nodes = std::iter::once(item)
                    .chain(similar)
                    .map(NodeId::Item)
                    .collect();
                let edge = Hyperedge {
                    kind: HyperedgeKind::HyperI,
                    owner: HyperedgeOwner::ItemTarget { item, target },
                    nodes,
                };
                ((item, target), edge)
            })
            .collect();
    }

    pub fn clear_hyperedges_i(&mut self) {
        self.hyperedges_i.clear();
    }

    pub fn incidence(&self) -> IncidenceView {
        IncidenceView::new(self)
    }

    /// All ordinary edges as `(domain, user, item, timestamp)`.
    pub fn edges(&self) -> Vec<(usize, usize, usize, u64)> {
        let mut out = Vec::new();
        for (un, list) in self.user_adj.iter().enumerate() {
            for &(item, ts) in list {
                out.push((un % self.domains, un / self.domains, item, ts));
            }
        }
        out
    }
}
