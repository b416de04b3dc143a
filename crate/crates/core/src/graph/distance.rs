//! Depth-bounded shortest paths over ordinary user-item edges.

use std::collections::VecDeque;

use super::{MultiDomainGraph, NodeId};

/// Pairwise bucketed hop counts among a node subset. Buckets are
/// `0..=d_max` for exact distances and `d_max + 1` for pairs farther apart
/// than `d_max` or disconnected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    size: usize,
    d_max: u8,
    buckets: Vec<u8>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn unreachable(&self) -> u8 {
        self.d_max + 1
    }

    pub fn get(&self, a: usize, b: usize) -> u8 {
        self.buckets[a * self.size + b]
    }

    /// Row-major buckets.
    pub fn buckets(&self) -> &[u8] {
        &self.buckets
    }
}

/// Hop distances from `source` to every node, `u8::MAX` beyond `d_max`.
pub(crate) fn bfs(graph: &MultiDomainGraph, source: usize, d_max: u8) -> Vec<u8> {
    let mut dist = vec![u8::MAX; graph.node_count()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        let d = dist[v];
        if d == d_max {
            continue;
        }
        for w in graph.neighbor_indices(v) {
            if dist[w] == u8::MAX {
                dist[w] = d + 1;
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Breadth-first distances among `nodes`, truncated at `d_max` hops.
/// Hyperedges are not traversed.
pub fn shortest_path_distances(
    graph: &MultiDomainGraph,
    nodes: &[NodeId],
    d_max: u8,
) -> DistanceMatrix {
    assert!((1..u8::MAX - 1).contains(&d_max), "d_max out of range");
    let idx: Vec<usize> = nodes.iter().map(|&n| graph.index(n)).collect();
    let size = idx.len();
    let mut buckets = vec![d_max + 1; size * size];
    for (a, &src) in idx.iter().enumerate() {
        let dist = bfs(graph, src, d_max);
        for (b, &dst) in idx.iter().enumerate() {
            if dist[dst] != u8::MAX {
                buckets[a * size + b] = dist[dst];
            }
        }
    }
    DistanceMatrix {
        size,
        d_max,
        buckets,
    }
}

/// Item-to-item bucketed distances, one BFS per item, for building the
/// attention bias of many item hyperedges cheaply.
#[derive(Debug, Clone)]
pub struct ItemDistances {
    d_max: u8,
    item_count: usize,
    rows: Vec<Vec<u8>>,
}

impl ItemDistances {
    pub fn new(graph: &MultiDomainGraph, d_max: u8) -> Self {
        let un = graph.user_node_count();
        let rows = (0..graph.item_count())
            .map(|i| {
                let dist = bfs(graph, un + i, d_max);
                dist[un..]
                    .iter()
                    .map(|&d| if d == u8::MAX { d_max + 1 } else { d })
                    .collect()
            })
            .collect();
        ItemDistances {
            d_max,
            item_count: graph.item_count(),
            rows,
        }
    }

    pub fn d_max(&self) -> u8 {
        self.d_max
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn get(&self, a: usize, b: usize) -> u8 {
        self.rows[a][b]
    }

    /// Row-major bucket matrix among `items`.
    pub fn matrix(&self, items: &[usize]) -> Vec<u8> {
        items
            .iter()
            .flat_map(|&a| items.iter().map(move |&b| self.rows[a][b]))
            .collect()
    }
}
