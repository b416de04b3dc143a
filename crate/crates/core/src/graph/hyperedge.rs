use std::collections::{BTreeSet, HashMap};

use super::{MultiDomainGraph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HyperedgeKind {
    HyperU,
    HyperI,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HyperedgeOwner {
    User(usize),
    ItemTarget { item: usize, target: usize },
}

/// A node set joined by one hyperedge. For hyperedge-i, position 0 holds
/// the source item and the rest are the similar target-domain items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hyperedge {
    pub kind: HyperedgeKind,
    pub owner: HyperedgeOwner,
    pub nodes: Vec<NodeId>,
}

/// Incidence queries over every hyperedge of a graph, hyperedge-u first
/// (by user) and then hyperedge-i (by source item, target domain).
#[derive(Debug, Clone)]
pub struct IncidenceView {
    edges: Vec<Vec<NodeId>>,
    node_edges: HashMap<NodeId, Vec<usize>>,
}

impl IncidenceView {
    pub fn new(graph: &MultiDomainGraph) -> Self {
        let edges: Vec<Vec<NodeId>> = graph
            .hyperedges_u()
            .iter()
            .chain(graph.hyperedges_i().values())
            .map(|e| e.nodes.clone())
            .collect();
        let mut node_edges: HashMap<NodeId, Vec<usize>> = HashMap::new();
        for (e, nodes) in edges.iter().enumerate() {
            for &v in nodes {
                let list = node_edges.entry(v).or_default();
                if list.last() != Some(&e) {
                    list.push(e);
                }
            }
        }
        IncidenceView { edges, node_edges }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// `h_ve`: whether hyperedge `e` contains `v`.
    pub fn contains(&self, v: NodeId, e: usize) -> bool {
        self.edges.get(e).is_some_and(|nodes| nodes.contains(&v))
    }

    /// `E_v`: hyperedges containing `v`.
    pub fn edges_of(&self, v: NodeId) -> &[usize] {
        self.node_edges.get(&v).map_or(&[], Vec::as_slice)
    }

    /// `V_e`: nodes of hyperedge `e`.
    pub fn nodes_of(&self, e: usize) -> &[NodeId] {
        &self.edges[e]
    }

    /// `N_v`: other nodes sharing at least one hyperedge with `v`.
    pub fn neighbors(&self, v: NodeId) -> BTreeSet<NodeId> {
        self.edges_of(v)
            .iter()
            .flat_map(|&e| self.edges[e].iter().copied())
            .filter(|&w| w != v)
            .collect()
    }
}
