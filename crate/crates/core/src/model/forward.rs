//! Forward pass over the L-hop computation subgraph of a set of output nodes.

use std::collections::BTreeSet;

use rand::Rng;

use super::layers::{
    gather_initial, hyper_i_refine, hyper_u_refine, message_pass_layer, Refinement, UpdateRows,
};
use super::{H3Model, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::graph::{ItemDistances, MultiDomainGraph};
use crate::numeric::{Tape, Tensor2, Var};

/// Neighbors used per node and hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fanout {
    All,
    Sample(usize),
}

/// Read-only inputs shared by every forward pass of a run.
#[derive(Debug, Clone, Copy)]
pub struct ForwardContext<'a> {
    pub graph: &'a MultiDomainGraph,
    /// Needed by the distance-biased variant.
    pub distances: Option<&'a ItemDistances>,
}

/// One step of a forward pass, in execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    HyperI { layer: usize, refined: usize },
    Aggregate { layer: usize, rows: usize },
    HyperU { layer: usize, users: usize },
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Sorted dense node indices of the final rows.
    pub nodes: Vec<usize>,
    /// Final representations, one row per entry of `nodes`.
    pub reps: Var,
    pub trace: Vec<Phase>,
}

impl ForwardOutput {
    pub fn row(&self, node: usize) -> Option<usize> {
        self.nodes.binary_search(&node).ok()
    }

    pub fn rows(&self, nodes: &[usize]) -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&n| {
                self.row(n)
                    .ok_or_else(|| Error::shape("forward", format!("node {n} was not computed")))
            })
            .collect()
    }
}

struct LayerPlan {
    /// Nodes whose layer-`l` rows are produced, sorted.
    nodes: Vec<usize>,
    /// Neighbor node indices for each entry of `nodes`.
    neighbors: Vec<Vec<usize>>,
    /// (item node, similar item nodes) refined on the layer input.
    refine: Vec<(usize, Vec<usize>)>,
}

fn add_siblings(graph: &MultiDomainGraph, set: &mut BTreeSet<usize>) {
    let t = graph.domains();
    let users: BTreeSet<usize> = set
        .iter()
        .filter(|&&n| graph.is_user_index(n))
        .map(|&n| n / t)
        .collect();
    set.extend(users.into_iter().flat_map(|u| u * t..(u + 1) * t));
}

impl H3Model {
    /// Record the representations of `outputs` (dense node indices) for
    /// target domain `target` on `tape`.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        ctx: ForwardContext<'_>,
        outputs: &[usize],
        target: usize,
        fanout: Fanout,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let graph = ctx.graph;
        if graph.user_count() != self.user_count || graph.item_count() != self.item_count {
            return Err(Error::Data(format!(
                "model built for {} users / {} items, graph has {} / {}",
                self.user_count,
                self.item_count,
                graph.user_count(),
                graph.item_count()
            )));
        }
        if target >= graph.domains() {
            return Err(Error::Data(format!(
                "target domain {target} of {}",
                graph.domains()
            )));
        }
        if let Some(&bad) = outputs.iter().find(|&&n| n >= graph.node_count()) {
            return Err(Error::Data(format!(
                "output node {bad} of {}",
                graph.node_count()
            )));
        }
        let variant = self.config.variant;
        let biased = self.ids.phi.is_some();
        let distances = match (biased, ctx.distances) {
            (true, None) => {
                return Err(Error::Config(
                    "distance-biased variant needs item distances".into(),
                ))
            }
            (_, d) => d,
        };
        let un = graph.user_node_count();
        let layers = self.config.layers();

        // Plan top-down: layer l needs its own rows, the rows of sampled
        // neighbors at l-1, and similar-item rows for Hyper-I at l-1.
        let mut set: BTreeSet<usize> = outputs.iter().copied().collect();
        if variant.has_hyper_u() {
            add_siblings(graph, &mut set);
        }
        let mut plans = Vec::with_capacity(layers);
        for l in (1..=layers).rev() {
            let nodes: Vec<usize> = set.iter().copied().collect();
            let mut next = set.clone();
            let neighbors: Vec<Vec<usize>> = nodes
                .iter()
                .map(|&v| {
                    let nb = match fanout {
                        Fanout::All => graph.neighbor_indices(v).collect(),
                        Fanout::Sample(n) => graph.sample_neighbor_indices(v, n, rng),
                    };
                    next.extend(nb.iter().copied());
                    nb
                })
                .collect();
            let mut refine = Vec::new();
            if variant.hyper_i().is_some() {
                for &v in next.range(un..) {
                    let item = v - un;
                    if graph.domain_has_item(target, item) {
                        continue;
                    }
                    if let Some(e) = graph.hyperedge_i(item, target) {
                        let similar: Vec<usize> =
                            e.nodes[1..].iter().map(|&n| graph.index(n)).collect();
                        if !similar.is_empty() {
                            refine.push((v, similar));
                        }
                    }
                }
                for (_, similar) in &refine {
                    next.extend(similar.iter().copied());
                }
            }
            if l > 1 && variant.has_hyper_u() {
                add_siblings(graph, &mut next);
            }
            plans.push(LayerPlan {
                nodes,
                neighbors,
                refine,
            });
            set = next;
        }
        plans.reverse();

        let mut prev_nodes: Vec<usize> = set.into_iter().collect();
        let embedding = tape.param(&self.params, self.ids.embedding);
        let mut h = gather_initial(tape, embedding, graph, &prev_nodes)?;
        let phi = self.ids.phi.map(|id| tape.param(&self.params, id));
        let mut trace = Vec::new();
        let pos = |nodes: &[usize], v: usize| nodes.binary_search(&v).expect("planned node");

        for (idx, plan) in plans.iter().enumerate() {
            let l = idx + 1;
            if let Some(ids) = self.ids.hyper_i[idx] {
                let refinements: Vec<Refinement> = plan
                    .refine
                    .iter()
                    .map(|(v, similar)| {
                        let buckets = distances.filter(|_| biased).map(|d| {
                            let i = v - un;
                            std::iter::once(0)
                                .chain(similar.iter().map(|&s| d.get(i, s - un)))
                                .collect::<Vec<u8>>()
                        });
                        Refinement {
                            row: pos(&prev_nodes, *v),
                            similar_rows: similar.iter().map(|&s| pos(&prev_nodes, s)).collect(),
                            buckets,
                        }
                    })
                    .collect();
                let w = ids.record(tape, &self.params);
                h = hyper_i_refine(tape, h, &refinements, phi, w, self.config.heads)?;
                trace.push(Phase::HyperI {
                    layer: l,
                    refined: refinements.len(),
                });
            }

            let split = plan.nodes.partition_point(|&v| v < un);
            let rows_of = |range: std::ops::Range<usize>| UpdateRows {
                self_rows: plan.nodes[range.clone()]
                    .iter()
                    .map(|&v| pos(&prev_nodes, v))
                    .collect(),
                neighbor_rows: plan.neighbors[range]
                    .iter()
                    .map(|nb| nb.iter().map(|&v| pos(&prev_nodes, v)).collect())
                    .collect(),
            };
            let users = rows_of(0..split);
            let items = rows_of(split..plan.nodes.len());
            let lw = &self.ids.layers[idx];
            let w = [lw.user_self, lw.user_nb, lw.item_self, lw.item_nb]
                .map(|id| tape.param(&self.params, id));
            let slope = (l < layers && !self.config.linear).then_some(LEAKY_SLOPE);
            h = message_pass_layer(tape, h, &users, &items, w, slope)?;
            trace.push(Phase::Aggregate {
                layer: l,
                rows: plan.nodes.len(),
            });

            if let Some(hu) = self.ids.hyper_u[idx] {
                let t = graph.domains();
                // Siblings were added for every user, so the sorted user
                // rows come in runs of T nodes of one user.
                let groups: Vec<Vec<usize>> = (0..split / t)
                    .map(|g| (g * t..(g + 1) * t).collect())
                    .collect();
                let w = hu.record(tape, &self.params);
                h = hyper_u_refine(tape, h, &groups, w, self.config.heads)?;
                trace.push(Phase::HyperU {
                    layer: l,
                    users: groups.len(),
                });
            }
            prev_nodes = plan.nodes.clone();
        }
        Ok(ForwardOutput {
            nodes: prev_nodes,
            reps: h,
            trace,
        })
    }

    /// Final representations of every node for target domain `target`,
    /// using full neighborhoods. Rows are dense node indices.
    pub fn represent_all(&self, ctx: ForwardContext<'_>, target: usize) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let all: Vec<usize> = (0..ctx.graph.node_count()).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = self.forward(&mut tape, ctx, &all, target, Fanout::All, &mut rng)?;
        Ok(tape.value(out.reps).clone())
    }
}
