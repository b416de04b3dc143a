//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every value produced during a forward pass together
//! with the rule that produced it. [`Tape::backward`] walks the records in
//! reverse production order, so each node is visited exactly once and only
//! after every consumer has pushed its contribution.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, Tensor2};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row groups for [`Tape::grouped_attention`].
///
/// Each group attends over its `members` (row indices into the Q/K/V
/// inputs). The first `queries` members emit an output row; the rest only
/// serve as keys and values. With `queries == members.len()` this is
/// ordinary self-attention within the group; with `queries == 1` only the
/// first row is refined.
#[derive(Debug, Clone, Default)]
pub struct AttentionGroups {
    pub groups: Vec<AttentionGroup>,
}

#[derive(Debug, Clone)]
pub struct AttentionGroup {
    pub members: Vec<usize>,
    pub queries: usize,
    /// Row-major `queries x members.len()` bias buckets, indexing columns
    /// of the per-head bias table. Required when a bias table is supplied.
    pub buckets: Option<Vec<u8>>,
}

impl AttentionGroups {
    pub fn output_rows(&self) -> usize {
        self.groups.iter().map(|g| g.queries).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Gather(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<[Vec<usize>]>),
    ReplaceRows(Var, Rc<[usize]>, Var),
    MaskedFill(Var, Rc<[bool]>),
    InnerProductRows(Var, Var),
    IndexedDots(Var, Rc<[usize]>, Rc<[usize]>),
    Reshape(Var),
    Log(Var),
    Exp(Var),
    LeakyRelu(Var, f64),
    L2NormalizeRows(Var),
    Attention(Box<AttentionRecord>),
}

#[derive(Debug)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    heads: usize,
    scale: f64,
    groups: Rc<AttentionGroups>,
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panic on the first non-finite value produced (debug aid).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        if self.check_finite {
            assert!(value.is_finite(), "non-finite value produced by {op:?}");
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf(None))
    }

    /// Record the current value of a stored parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Leaf(Some(id)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("widths {cols} and {}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = self.value(first).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("heights {rows} and {}", self.value(bad).rows()),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor2::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, va.shape()),
            ));
        }
        let mut out = Tensor2::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r)
                .copy_from_slice(&va.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Column-wise mean, producing a single row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(Error::shape("mean_rows", "empty input"));
        }
        let mut out = Tensor2::zeros(1, va.cols());
        for r in 0..va.rows() {
            out.add_scaled_row(0, va.row(r), 1.0);
        }
        let n = va.rows() as f64;
        let out = out.map(|x| x / n);
        Ok(self.push(out, Op::MeanRows(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor2::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.data().len().max(1) as f64;
        self.push(Tensor2::scalar(s), Op::MeanAll(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Stable `log(sum(exp(row)))`, one value per row.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| logsumexp(va.row(r))).collect();
        let out = Tensor2::from_vec(va.rows(), 1, data).expect("shape");
        self.push(out, Op::LogSumExpRows(a))
    }

    /// Rows of `a` selected by `ids`, with repetition. Also serves as
    /// embedding lookup when `a` is an embedding table.
    pub fn gather_rows(&mut self, a: Var, ids: impl Into<Rc<[usize]>>) -> Result<Var> {
        let ids = ids.into();
        let va = self.value(a);
        if let Some(&bad) = ids.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {:?}", va.shape()),
            ));
        }
        let mut out = Tensor2::zeros(ids.len(), va.cols());
        for (o, &i) in ids.iter().enumerate() {
            out.row_mut(o).copy_from_slice(va.row(i));
        }
        Ok(self.push(out, Op::Gather(a, ids)))
    }

    pub fn embedding_gather(&mut self, table: Var, ids: impl Into<Rc<[usize]>>) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// One output row per segment: the mean of the listed rows of `a`, or
    /// zeros for an empty segment.
    pub fn segment_mean(&mut self, a: Var, segments: impl Into<Rc<[Vec<usize>]>>) -> Result<Var> {
        let segments = segments.into();
        let va = self.value(a);
        let mut out = Tensor2::zeros(segments.len(), va.cols());
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                continue;
            }
            let w = 1.0 / seg.len() as f64;
            for &i in seg.iter() {
                if i >= va.rows() {
                    return Err(Error::shape(
                        "segment_mean",
                        format!("row {i} of {:?}", va.shape()),
                    ));
                }
                out.add_scaled_row(s, va.row(i), w);
            }
        }
        Ok(self.push(out, Op::SegmentMean(a, segments)))
    }

    /// Copy of `base` with row `idx[j]` replaced by row `j` of `src`.
    pub fn replace_rows(
        &mut self,
        base: Var,
        idx: impl Into<Rc<[usize]>>,
        src: Var,
    ) -> Result<Var> {
        let idx = idx.into();
        let (vb, vs) = (self.value(base), self.value(src));
        if vs.rows() != idx.len() || vs.cols() != vb.cols() {
            return Err(Error::shape(
                "replace_rows",
                format!(
                    "{} rows of {:?} into {:?}",
                    idx.len(),
                    vs.shape(),
                    vb.shape()
                ),
            ));
        }
        let mut out = vb.clone();
        for (j, &i) in idx.iter().enumerate() {
            if i >= out.rows() {
                return Err(Error::shape(
                    "replace_rows",
                    format!("row {i} of {:?}", vb.shape()),
                ));
            }
            out.row_mut(i).copy_from_slice(vs.row(j));
        }
        Ok(self.push(out, Op::ReplaceRows(base, idx, src)))
    }

    /// Set entries where `mask` is true to `value`; no gradient flows there.
    pub fn masked_fill(&mut self, a: Var, mask: impl Into<Rc<[bool]>>, value: f64) -> Result<Var> {
        let mask = mask.into();
        let va = self.value(a);
        if mask.len() != va.data().len() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} for {:?}", mask.len(), va.shape()),
            ));
        }
        let mut out = va.clone();
        for (x, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
            if m {
                *x = value;
            }
        }
        Ok(self.push(out, Op::MaskedFill(a, mask)))
    }

    /// Row-wise inner products, one value per row.
    pub fn inner_product_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "inner_product_rows",
                format!("{:?} . {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = (0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect();
        let out = Tensor2::from_vec(va.rows(), 1, data)?;
        Ok(self.push(out, Op::InnerProductRows(a, b)))
    }

    /// `rows x cols` matrix whose entry `p` (row-major) is the inner product
    /// of rows `left[p]` and `right[p]` of `a`. Equivalent to gathering both
    /// sides, `inner_product_rows` and `reshape`, without the copies.
    pub fn indexed_dots(
        &mut self,
        a: Var,
        left: impl Into<Rc<[usize]>>,
        right: impl Into<Rc<[usize]>>,
        cols: usize,
    ) -> Result<Var> {
        let (left, right) = (left.into(), right.into());
        let va = self.value(a);
        if left.len() != right.len() || cols == 0 || left.len() % cols != 0 {
            return Err(Error::shape(
                "indexed_dots",
                format!(
                    "{} left, {} right indices in rows of {cols}",
                    left.len(),
                    right.len()
                ),
            ));
        }
        if let Some(&bad) = left.iter().chain(right.iter()).find(|&&i| i >= va.rows()) {
            return Err(Error::shape(
                "indexed_dots",
                format!("row {bad} of {:?}", va.shape()),
            ));
        }
        let data = left
            .iter()
            .zip(right.iter())
            .map(|(&l, &r)| dot(va.row(l), va.row(r)))
            .collect();
        let out = Tensor2::from_vec(left.len() / cols, cols, data)?;
        Ok(self.push(out, Op::IndexedDots(a, left, right)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if rows * cols != va.data().len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to ({rows}, {cols})", va.shape()),
            ));
        }
        let out = Tensor2::from_vec(rows, cols, va.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    /// Scale each row to unit length. All-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    /// Multi-head scaled dot-product attention within row groups.
    ///
    /// `q`, `k`, `v` are already-projected `n x (heads * d_head)` matrices.
    /// Head `p` uses columns `p*d_head..(p+1)*d_head` and logits are scaled
    /// by `1/sqrt(d_head)`. When `bias` is given it must be a
    /// `heads x buckets` table; the logit for query `a` and key `b` gains
    /// `bias[p][bucket(a, b)]`. Output rows follow group order, `queries`
    /// rows per group, with heads concatenated along columns.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        groups: Rc<AttentionGroups>,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", vq.shape(), vk.shape(), vv.shape()),
            ));
        }
        let width = vq.cols();
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{heads} heads do not divide width {width}"),
            ));
        }
        let d_head = width / heads;
        let scale = 1.0 / (d_head as f64).sqrt();
        let table = bias.map(|b| self.value(b));
        if let Some(t) = table {
            if t.rows() != heads {
                return Err(Error::shape(
                    "attention",
                    format!("bias table {:?} for {heads} heads", t.shape()),
                ));
            }
        }
        let n = vq.rows();
        let mut out = Tensor2::zeros(groups.output_rows(), width);
        let mut probs = Vec::new();
        let mut out_row = 0;
        let mut logits = Vec::new();
        for g in &groups.groups {
            let len = g.members.len();
            if g.queries > len {
                return Err(Error::shape(
                    "attention",
                    format!("{} queries in a group of {len}", g.queries),
                ));
            }
            if let Some(&bad) = g.members.iter().find(|&&m| m >= n) {
                return Err(Error::shape(
                    "attention",
                    format!("member row {bad} of {n}"),
                ));
            }
            if let Some(t) = table {
                match &g.buckets {
                    Some(b) if b.len() == g.queries * len => {
                        if let Some(&bad) = b.iter().find(|&&x| x as usize >= t.cols()) {
                            return Err(Error::shape(
                                "attention",
                                format!("bucket {bad} outside bias table {:?}", t.shape()),
                            ));
                        }
                    }
                    _ => {
                        return Err(Error::shape(
                            "attention",
                            "bias buckets missing or mis-sized",
                        ))
                    }
                }
            }
            for a in 0..g.queries {
                let qa = vq.row(g.members[a]);
                for p in 0..heads {
                    let cols = p * d_head..(p + 1) * d_head;
                    logits.clear();
                    for (b, &mb) in g.members.iter().enumerate() {
                        let mut s = dot(&qa[cols.clone()], &vk.row(mb)[cols.clone()]) * scale;
                        if let (Some(t), Some(buckets)) = (table, &g.buckets) {
                            s += t.get(p, buckets[a * len + b] as usize);
                        }
                        logits.push(s);
                    }
                    softmax_in_place(&mut logits);
                    let o = &mut out.row_mut(out_row)[cols.clone()];
                    for (&w, &mb) in logits.iter().zip(&g.members) {
                        for (x, &y) in o.iter_mut().zip(&vv.row(mb)[cols.clone()]) {
                            *x += w * y;
                        }
                    }
                    probs.extend_from_slice(&logits);
                }
                out_row += 1;
            }
        }
        let record = AttentionRecord {
            q,
            k,
            v,
            bias,
            heads,
            scale,
            groups,
            probs,
        };
        Ok(self.push(out, Op::Attention(Box::new(record))))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    /// The tape is left untouched, so repeated calls agree exactly.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient per stored parameter; parameters the loss does not reach
    /// get zeros. Leaves recorded from the same parameter are summed.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor2> {
        let mut out: Vec<Tensor2> = store
            .iter()
            .map(|(_, t)| Tensor2::zeros(t.rows(), t.cols()))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, &grads.grads[i]) {
                out[id.index()].add_assign(g);
            }
        }
        out
    }

    fn propagate(&self, idx: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_nt(self.value(*b));
                let gb = self.value(*a).matmul_tn(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    accumulate(
                        grads,
                        p,
                        Tensor2::from_vec(rows, cols, slice).expect("shape"),
                    );
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let mut part = Tensor2::zeros(rows, cols);
                    for r in 0..rows {
                        part.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    accumulate(grads, p, part);
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    ga.add_scaled_row(r, g.row(0), 1.0 / rows as f64);
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.value(*a).shape();
                accumulate(grads, *a, Tensor2::filled(rows, cols, g.item()));
            }
            Op::MeanAll(a) => {
                let (rows, cols) = self.value(*a).shape();
                let n = (rows * cols).max(1) as f64;
                accumulate(grads, *a, Tensor2::filled(rows, cols, g.item() / n));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - inner);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let mut ga = x.clone();
                for r in 0..x.rows() {
                    let lse = node.value.get(r, 0);
                    let gr = g.get(r, 0);
                    ga.row_mut(r)
                        .iter_mut()
                        .for_each(|v| *v = (*v - lse).exp() * gr);
                }
                accumulate(grads, *a, ga);
            }
            Op::Gather(a, ids) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor2::zeros(rows, cols);
                for (o, &i) in ids.iter().enumerate() {
                    ga.add_scaled_row(i, g.row(o), 1.0);
                }
                accumulate(grads, *a, ga);
            }
            Op::SegmentMean(a, segments) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor2::zeros(rows, cols);
                for (s, seg) in segments.iter().enumerate() {
                    if seg.is_empty() {
                        continue;
                    }
                    let w = 1.0 / seg.len() as f64;
                    for &i in seg {
                        ga.add_scaled_row(i, g.row(s), w);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ReplaceRows(base, idx_rows, src) => {
                let mut gb = g.clone();
                let mut gs = Tensor2::zeros(idx_rows.len(), g.cols());
                for (j, &i) in idx_rows.iter().enumerate() {
                    gs.row_mut(j).copy_from_slice(g.row(i));
                    gb.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
                }
                accumulate(grads, *base, gb);
                accumulate(grads, *src, gs);
            }
            Op::MaskedFill(a, mask) => {
                let mut ga = g.clone();
                for (x, &m) in ga.data_mut().iter_mut().zip(mask.iter()) {
                    if m {
                        *x = 0.0;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::InnerProductRows(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor2::zeros(va.rows(), va.cols());
                let mut gb = Tensor2::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    let s = g.get(r, 0);
                    ga.add_scaled_row(r, vb.row(r), s);
                    gb.add_scaled_row(r, va.row(r), s);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::IndexedDots(a, left, right) => {
                let va = self.value(*a);
                let mut ga = Tensor2::zeros(va.rows(), va.cols());
                for ((&l, &r), &s) in left.iter().zip(right.iter()).zip(g.data()) {
                    ga.add_scaled_row(l, va.row(r), s);
                    ga.add_scaled_row(r, va.row(l), s);
                }
                accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.value(*a).shape();
                accumulate(
                    grads,
                    *a,
                    Tensor2::from_vec(rows, cols, g.data().to_vec()).expect("shape"),
                );
            }
            Op::Log(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, xi)| gi / xi)
                    .collect();
                accumulate(
                    grads,
                    *a,
                    Tensor2::from_vec(x.rows(), x.cols(), data).expect("shape"),
                );
            }
            Op::Exp(a) => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| gi * yi)
                    .collect();
                accumulate(
                    grads,
                    *a,
                    Tensor2::from_vec(y.rows(), y.cols(), data).expect("shape"),
                );
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { slope * gi })
                    .collect();
                accumulate(
                    grads,
                    *a,
                    Tensor2::from_vec(x.rows(), x.cols(), data).expect("shape"),
                );
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = Tensor2::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = dot(x.row(r), x.row(r)).sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let proj = dot(y.row(r), g.row(r));
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = (g.get(r, c) - y.get(r, c) * proj) / norm;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Attention(rec) => self.attention_backward(rec, g, grads),
        }
    }

    fn attention_backward(
        &self,
        rec: &AttentionRecord,
        g: &Tensor2,
        grads: &mut [Option<Tensor2>],
    ) {
        let (vq, vk, vv) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let width = vq.cols();
        let d_head = width / rec.heads;
        let mut gq = Tensor2::zeros(vq.rows(), width);
        let mut gk = Tensor2::zeros(vk.rows(), width);
        let mut gv = Tensor2::zeros(vv.rows(), width);
        let mut gbias = rec.bias.map(|b| {
            let t = self.value(b);
            Tensor2::zeros(t.rows(), t.cols())
        });
        let mut probs_at = 0;
        let mut out_row = 0;
        let mut dlogits = Vec::new();
        for grp in &rec.groups.groups {
            let len = grp.members.len();
            for a in 0..grp.queries {
                let ma = grp.members[a];
                let go = g.row(out_row);
                for p in 0..rec.heads {
                    let cols = p * d_head..(p + 1) * d_head;
                    let probs = &rec.probs[probs_at..probs_at + len];
                    probs_at += len;
                    let go_p = &go[cols.clone()];
                    dlogits.clear();
                    for (b, &mb) in grp.members.iter().enumerate() {
                        let w = probs[b];
                        for (x, &y) in gv.row_mut(mb)[cols.clone()].iter_mut().zip(go_p) {
                            *x += w * y;
                        }
                        dlogits.push(dot(go_p, &vv.row(mb)[cols.clone()]));
                    }
                    let inner: f64 = probs.iter().zip(&dlogits).map(|(w, d)| w * d).sum();
                    for (b, &mb) in grp.members.iter().enumerate() {
                        let ds = probs[b] * (dlogits[b] - inner);
                        if ds == 0.0 {
                            continue;
                        }
                        let s = ds * rec.scale;
                        for c in cols.clone() {
                            gq.data_mut()[ma * width + c] += s * vk.get(mb, c);
                            gk.data_mut()[mb * width + c] += s * vq.get(ma, c);
                        }
                        if let (Some(gb), Some(buckets)) = (gbias.as_mut(), &grp.buckets) {
                            let col = buckets[a * len + b] as usize;
                            let cur = gb.get(p, col);
                            gb.set(p, col, cur + ds);
                        }
                    }
                }
                out_row += 1;
            }
        }
        accumulate(grads, rec.q, gq);
        accumulate(grads, rec.k, gk);
        accumulate(grads, rec.v, gv);
        if let (Some(b), Some(gb)) = (rec.bias, gbias) {
            accumulate(grads, b, gb);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2::from_rows(&[vec![0.0, 0.0]]));
        let s = tape.softmax_rows(a);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2::zeros(2, 2));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn sum_of_gathered_row_has_unit_gradient_on_that_row_only() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
        ]));
        let row = tape.gather_rows(x, vec![1]).unwrap();
        let loss = tape.sum_all(row);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1]]));
        let y = tape.matmul(x, x).unwrap();
        let s = tape.softmax_rows(y);
        let loss = tape.sum_all(s);
        let first = tape.backward(loss).unwrap();
        let second = tape.backward(loss).unwrap();
        assert_eq!(first.get(x), second.get(x));
    }

    #[test]
    fn segment_mean_of_empty_segment_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]));
        let m = tape.segment_mean(x, vec![vec![0, 1], vec![]]).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2::zeros(2, 3));
        let b = tape.constant(Tensor2::zeros(3, 2));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("(2, 3)"), "{err}");
    }
}
