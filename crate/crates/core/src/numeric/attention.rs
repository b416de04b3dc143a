//! Multi-head attention, in two forms.
//!
//! [`attention`] composes the op from tape primitives for a single set of
//! rows and an optional dense per-head bias. [`grouped_self_attention`]
//! runs the same computation over many small row groups at once through
//! the fused [`Tape::grouped_attention`] kernel; the model uses it, and the
//! tests check the two against each other.

use std::rc::Rc;

use super::tape::{AttentionGroups, Tape, Var};
use crate::error::{Error, Result};

/// Projection matrices of one attention block, already recorded on a tape.
/// Each is `d x d`; head `p` owns column block `p` of the Q/K/V projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// `concat_p(softmax(Q_p K_p^T / sqrt(d/P) + bias_p) V_p) W^O`, with
/// `Q = q_in W^Q`, `K = k_in W^K`, `V = v_in W^V`.
///
/// `bias`, when given, holds one `rows x rows` matrix per head.
pub fn attention(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    bias: Option<&[Var]>,
    heads: usize,
    w: AttentionVars,
) -> Result<Var> {
    let rows = tape.value(q_in).rows();
    if tape.value(k_in).rows() != rows || tape.value(v_in).rows() != rows {
        return Err(Error::shape(
            "attention",
            format!(
                "row counts {} / {} / {}",
                rows,
                tape.value(k_in).rows(),
                tape.value(v_in).rows()
            ),
        ));
    }
    let q = tape.matmul(q_in, w.wq)?;
    let k = tape.matmul(k_in, w.wk)?;
    let v = tape.matmul(v_in, w.wv)?;
    let width = tape.value(q).cols();
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::shape(
            "attention",
            format!("{heads} heads do not divide width {width}"),
        ));
    }
    if let Some(b) = bias {
        if b.len() != heads {
            return Err(Error::shape(
                "attention",
                format!("{} bias matrices for {heads} heads", b.len()),
            ));
        }
    }
    let d_head = width / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for p in 0..heads {
        let qp = tape.slice_cols(q, p * d_head, d_head)?;
        let kp = tape.slice_cols(k, p * d_head, d_head)?;
        let vp = tape.slice_cols(v, p * d_head, d_head)?;
        let kt = transpose(tape, kp)?;
        let logits = tape.matmul(qp, kt)?;
        let mut logits = tape.scale(logits, scale);
        if let Some(b) = bias {
            logits = tape.add(logits, b[p])?;
        }
        let probs = tape.softmax_rows(logits);
        outs.push(tape.matmul(probs, vp)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, w.wo)
}

// Transpose built from reshape + gather so it stays differentiable.
fn transpose(tape: &mut Tape, a: Var) -> Result<Var> {
    let (rows, cols) = tape.value(a).shape();
    let flat = tape.reshape(a, rows * cols, 1)?;
    let order: Vec<usize> = (0..cols)
        .flat_map(|c| (0..rows).map(move |r| r * cols + c))
        .collect();
    let permuted = tape.gather_rows(flat, order)?;
    tape.reshape(permuted, cols, rows)
}

/// Fused multi-head attention over row groups of `x`, followed by `W^O`.
///
/// `bias_table` is a `heads x buckets` table indexed by each group's
/// buckets. Output rows follow [`AttentionGroups`] order.
pub fn grouped_self_attention(
    tape: &mut Tape,
    x: Var,
    groups: Rc<AttentionGroups>,
    bias_table: Option<Var>,
    heads: usize,
    w: AttentionVars,
) -> Result<Var> {
    let q = tape.matmul(x, w.wq)?;
    let k = tape.matmul(x, w.wk)?;
    let v = tape.matmul(x, w.wv)?;
    let attended = tape.grouped_attention(q, k, v, bias_table, heads, groups)?;
    tape.matmul(attended, w.wo)
}
