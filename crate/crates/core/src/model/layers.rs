//! Building blocks of one message-passing layer, each recorded on a tape.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::MultiDomainGraph;
use crate::numeric::{
    dot, grouped_self_attention, AttentionGroup, AttentionGroups, AttentionVars, ParamId,
    ParamStore, Tape, Var,
};
use crate::retrieval::Similarity;

/// Node-update weights of one layer (`d_in x d_out` each).
#[derive(Debug, Clone, Copy)]
pub struct LayerWeights {
    pub user_self: ParamId,
    pub user_nb: ParamId,
    pub item_self: ParamId,
    pub item_nb: ParamId,
}

/// Q/K/V/O projections of one attention block; head `p` owns column block
/// `p` of the Q/K/V matrices.
#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionIds {
    pub(crate) fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        AttentionIds {
            wq: store.add_uniform(format!("{prefix}.wq"), d, d, d, rng),
            wk: store.add_uniform(format!("{prefix}.wk"), d, d, d, rng),
            wv: store.add_uniform(format!("{prefix}.wv"), d, d, d, rng),
            wo: store.add_uniform(format!("{prefix}.wo"), d, d, d, rng),
        }
    }

    pub fn record(&self, tape: &mut Tape, store: &ParamStore) -> AttentionVars {
        AttentionVars {
            wq: tape.param(store, self.wq),
            wk: tape.param(store, self.wk),
            wv: tape.param(store, self.wv),
            wo: tape.param(store, self.wo),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum HyperUWeights {
    Attention(AttentionIds),
    /// Shared linear layer applied to the mean of a user's rows.
    Combine(ParamId),
}

/// [`HyperUWeights`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub enum HyperUVars {
    Attention(AttentionVars),
    Combine(Var),
}

impl HyperUWeights {
    pub fn record(&self, tape: &mut Tape, store: &ParamStore) -> HyperUVars {
        match self {
            HyperUWeights::Attention(ids) => HyperUVars::Attention(ids.record(tape, store)),
            HyperUWeights::Combine(id) => HyperUVars::Combine(tape.param(store, *id)),
        }
    }
}

/// Layer-0 rows for dense node indices: every `UserNode(u, m)` reads the
/// embedding row of `u`, every `ItemNode(i)` the row of `i`.
pub fn gather_initial(
    tape: &mut Tape,
    embedding: Var,
    graph: &MultiDomainGraph,
    nodes: &[usize],
) -> Result<Var> {
    let un = graph.user_node_count();
    let users = graph.user_count();
    let rows: Vec<usize> = nodes
        .iter()
        .map(|&n| {
            if n < un {
                n / graph.domains()
            } else {
                users + (n - un)
            }
        })
        .collect();
    if let Some(&bad) = nodes.iter().find(|&&n| n >= graph.node_count()) {
        return Err(Error::shape(
            "gather_initial",
            format!("node {bad} of {}", graph.node_count()),
        ));
    }
    tape.embedding_gather(embedding, rows)
}

/// Rows of one layer's computation for one node type.
#[derive(Debug, Clone, Default)]
pub struct UpdateRows {
    /// Row of each node in the previous layer's matrix.
    pub self_rows: Vec<usize>,
    /// Previous-layer rows of each node's (sampled) neighbors.
    pub neighbor_rows: Vec<Vec<usize>>,
}

/// Mean aggregation then linear update,
/// `h' = h W_self + mean(h_N) W_nb`, for user rows then item rows. The
/// result stacks the user rows above the item rows. A node without
/// neighbors aggregates the zero vector. `slope` applies a leaky rectifier.
pub fn message_pass_layer(
    tape: &mut Tape,
    h_prev: Var,
    users: &UpdateRows,
    items: &UpdateRows,
    w: [Var; 4],
    slope: Option<f64>,
) -> Result<Var> {
    let [user_self, user_nb, item_self, item_nb] = w;
    let mut parts = Vec::with_capacity(2);
    for (rows, ws, wn) in [(users, user_self, user_nb), (items, item_self, item_nb)] {
        if rows.self_rows.is_empty() {
            continue;
        }
        let own = tape.gather_rows(h_prev, rows.self_rows.clone())?;
        let nb = tape.segment_mean(h_prev, rows.neighbor_rows.clone())?;
        let a = tape.matmul(own, ws)?;
        let b = tape.matmul(nb, wn)?;
        parts.push(tape.add(a, b)?);
    }
    let out = match parts.len() {
        0 => return Err(Error::shape("message_pass_layer", "no rows to update")),
        1 => parts[0],
        _ => tape.concat_rows(&parts)?,
    };
    Ok(match slope {
        Some(s) => tape.leaky_relu(out, s),
        None => out,
    })
}

/// One item to refine: its row, the rows of its similar items, and
/// optionally the distance buckets from it to `[itself, similar...]`.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub row: usize,
    pub similar_rows: Vec<usize>,
    pub buckets: Option<Vec<u8>>,
}

/// Replace each refined item's row with output row 0 of attention over
/// `[h_i; h_j1; ...; h_jk]`. Items with no similar rows are left as is.
/// `phi` (a `heads x buckets` table) adds the distance bias.
pub fn hyper_i_refine(
    tape: &mut Tape,
    h: Var,
    refinements: &[Refinement],
    phi: Option<Var>,
    w: AttentionVars,
    heads: usize,
) -> Result<Var> {
    let active: Vec<&Refinement> = refinements
        .iter()
        .filter(|r| !r.similar_rows.is_empty())
        .collect();
    if active.is_empty() {
        return Ok(h);
    }
    // Groups index rows of `h` directly; projecting `h` once is cheaper than
    // projecting a stacked copy per group.
    let mut groups = Vec::with_capacity(active.len());
    for r in &active {
        let members: Vec<usize> = std::iter::once(r.row)
            .chain(r.similar_rows.iter().copied())
            .collect();
        let buckets = match (phi, &r.buckets) {
            (Some(_), Some(b)) if b.len() == members.len() => Some(b.clone()),
            (Some(_), _) => {
                return Err(Error::shape(
                    "hyper_i_refine",
                    "distance buckets missing for biased attention",
                ))
            }
            (None, _) => None,
        };
        groups.push(AttentionGroup {
            members,
            queries: 1,
            buckets,
        });
    }
    let out = grouped_self_attention(tape, h, Rc::new(AttentionGroups { groups }), phi, heads, w)?;
    let targets: Vec<usize> = active.iter().map(|r| r.row).collect();
    tape.replace_rows(h, targets, out)
}

/// Refine each user's per-domain rows (`groups[g]` lists the rows of one
/// user) jointly: self-attention within the group, or the combine layer
/// applied to the group mean and broadcast back to every member.
pub fn hyper_u_refine(
    tape: &mut Tape,
    h: Var,
    groups: &[Vec<usize>],
    w: HyperUVars,
    heads: usize,
) -> Result<Var> {
    if groups.is_empty() {
        return Ok(h);
    }
    let members: Vec<usize> = groups.iter().flatten().copied().collect();
    let refined = match w {
        HyperUVars::Attention(att) => {
            let groups = groups
                .iter()
                .map(|g| AttentionGroup {
                    members: g.clone(),
                    queries: g.len(),
                    buckets: None,
                })
                .collect();
            grouped_self_attention(
                tape,
                h,
                Rc::new(AttentionGroups { groups }),
                None,
                heads,
                att,
            )?
        }
        HyperUVars::Combine(wc) => {
            let means = tape.segment_mean(h, groups.to_vec())?;
            let combined = tape.matmul(means, wc)?;
            let expand: Vec<usize> = groups
                .iter()
                .enumerate()
                .flat_map(|(g, m)| std::iter::repeat_n(g, m.len()))
                .collect();
            tape.gather_rows(combined, expand)?
        }
    };
    tape.replace_rows(h, members, refined)
}

/// Final representation: the last layer's output.
pub fn readout(layers: &[Var]) -> Option<Var> {
    layers.last().copied()
}

/// Score of a user representation against an item representation.
pub fn predict(z_user: &[f64], z_item: &[f64], similarity: Similarity) -> f64 {
    let s = dot(z_user, z_item);
    match similarity {
        Similarity::InnerProduct => s,
        Similarity::Cosine => {
            let denom = dot(z_user, z_user).sqrt() * dot(z_item, z_item).sqrt();
            if denom > 0.0 {
                s / denom
            } else {
                0.0
            }
        }
    }
}

/// Row-wise scores of two equally shaped matrices, on the tape.
pub fn score_rows(tape: &mut Tape, a: Var, b: Var, similarity: Similarity) -> Result<Var> {
    match similarity {
        Similarity::InnerProduct => tape.inner_product_rows(a, b),
        Similarity::Cosine => {
            let na = tape.l2_normalize_rows(a);
            let nb = tape.l2_normalize_rows(b);
            tape.inner_product_rows(na, nb)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor2;

    fn identity_attention(tape: &mut Tape, d: usize) -> AttentionVars {
        AttentionVars {
            wq: tape.constant(Tensor2::zeros(d, d)),
            wk: tape.constant(Tensor2::zeros(d, d)),
            wv: tape.constant(Tensor2::identity(d)),
            wo: tape.constant(Tensor2::identity(d)),
        }
    }

    #[test]
    fn predict_unit_and_orthogonal() {
        assert_eq!(
            predict(&[1.0, 0.0], &[1.0, 0.0], Similarity::InnerProduct),
            1.0
        );
        assert_eq!(
            predict(&[1.0, 0.0], &[0.0, 1.0], Similarity::InnerProduct),
            0.0
        );
        let a = predict(&[0.3, 0.4], &[1.0, 2.0], Similarity::Cosine);
        let b = predict(&[0.3, 0.4], &[3.0, 6.0], Similarity::Cosine);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn empty_similar_set_leaves_row_untouched() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor2::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]));
        let w = identity_attention(&mut tape, 2);
        let r = Refinement {
            row: 0,
            similar_rows: vec![],
            buckets: None,
        };
        let out = hyper_i_refine(&mut tape, h, &[r], None, w, 1).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn zero_logits_refine_to_the_mean_of_stacked_rows() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor2::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 3.0],
            vec![2.0, 3.0],
        ]));
        let w = identity_attention(&mut tape, 2);
        let r = Refinement {
            row: 0,
            similar_rows: vec![1, 2],
            buckets: None,
        };
        let out = hyper_i_refine(&mut tape, h, &[r], None, w, 2).unwrap();
        let v = tape.value(out);
        assert!((v.get(0, 0) - 1.0).abs() < 1e-15 && (v.get(0, 1) - 2.0).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 3.0]);
    }

    #[test]
    fn mean_combine_with_identity_averages_user_rows() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor2::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 6.0],
            vec![9.0, 9.0],
        ]));
        let wc = tape.constant(Tensor2::identity(2));
        let out = hyper_u_refine(&mut tape, h, &[vec![0, 1]], HyperUVars::Combine(wc), 1).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), &[2.0, 4.0]);
        assert_eq!(v.row(1), &[2.0, 4.0]);
        assert_eq!(v.row(2), &[9.0, 9.0]);
    }

    #[test]
    fn single_domain_attention_with_identity_is_identity() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor2::from_rows(&[vec![0.5, -1.5]]));
        let mut w = identity_attention(&mut tape, 2);
        w.wq = tape.constant(Tensor2::identity(2));
        w.wk = tape.constant(Tensor2::identity(2));
        let out = hyper_u_refine(&mut tape, h, &[vec![0]], HyperUVars::Attention(w), 2).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }
}
