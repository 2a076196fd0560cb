//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Values are computed eagerly as nodes are appended, so insertion order is a
//! topological order and the backward pass is a single reverse sweep. The
//! sweep visits every node exactly once and accumulates gradients in a fixed
//! order, which makes repeated backward passes bit-identical.
//!
//! Softmax and log-sum-exp kernels subtract the row maximum before
//! exponentiating; `-inf` logit entries are the masking sentinel and map to
//! exactly zero probability.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::{axpy, dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a(m,k) * b(k,n)
    Matmul(NodeId, NodeId),
    /// a(m,k) * b(n,k)^T
    MatmulNt(NodeId, NodeId),
    /// A(m,n) * x[n] -> [m]
    MatVec(NodeId, NodeId),
    /// A(m,n)^T * x[m] -> [n]
    TMatVec(NodeId, NodeId),
    /// x[n] . y[n] -> [1]
    Dot(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// M(m,n) + bias[n] broadcast over rows
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Elu(NodeId),
    SoftmaxVec(NodeId),
    SoftmaxRows(NodeId),
    /// Row-wise log-sum-exp of (m,n) -> [m]
    LogSumExpRows(NodeId),
    /// Rows scaled to unit L2 norm (rank-1 input = one row)
    NormalizeRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Row-wise dot of two (m,n) tensors -> [m]
    RowDot(NodeId, NodeId),
    /// Diagonal of a square matrix -> [m]
    DiagPart(NodeId),
    Reshape(NodeId),
    ConcatVecs(Vec<NodeId>),
    /// Concatenate (m, c_i) blocks along columns
    ConcatCols(Vec<NodeId>),
    /// Stack k rank-1 [d] vectors into (k, d)
    StackRows(Vec<NodeId>),
    /// Select rows (rank-2) or elements (rank-1) by index, duplicates allowed
    GatherRows(NodeId, Arc<Vec<usize>>),
    /// Softmax within contiguous segments of a rank-1 tensor
    SegmentSoftmax(NodeId, Arc<Vec<usize>>),
    /// out[s] = sum_{e in segment s} w[e] * rows[e] for contiguous segments
    SegmentWeightedSum {
        weights: NodeId,
        rows: NodeId,
        seg_ptr: Arc<Vec<usize>>,
    },
    /// Mean of elementwise stable binary cross-entropy against fixed labels
    BceWithLogitsMean(NodeId, Arc<Vec<f64>>),
}

struct Node {
    op: Op,
    value: Tensor,
    wants_grad: bool,
}

/// Gradients produced by a backward sweep, indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a node, or zeros of the given shape when the node was
    /// never touched by the sweep.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.grads[id.0].as_ref() {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, wants_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            wants_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].wants_grad
    }

    fn any_wants(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.wants(*id))
    }

    /// Leaf that participates in differentiation (parameters and any input a
    /// gradient is needed for).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dims {}x{} vs {}x{}", m, k, bv.rows(), n);
        let v = matmul_kernel(av.data(), bv.data(), m, k, n);
        let w = self.any_wants(&[a, b]);
        self.push(Op::Matmul(a, b), Tensor::matrix(m, n, v), w)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_nt inner dim mismatch");
        let v = matmul_nt_kernel(av.data(), bv.data(), m, k, n);
        let w = self.any_wants(&[a, b]);
        self.push(Op::MatmulNt(a, b), Tensor::matrix(m, n, v), w)
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let (av, xv) = (self.value(a), self.value(x));
        assert_eq!(xv.rank(), 1, "matvec expects rank-1 x");
        assert_eq!(av.cols(), xv.len(), "matvec dim mismatch");
        let m = av.rows();
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = dot(av.row(i), xv.data());
        }
        let w = self.any_wants(&[a, x]);
        self.push(Op::MatVec(a, x), Tensor::vector(out), w)
    }

    pub fn tmatvec(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let (av, xv) = (self.value(a), self.value(x));
        assert_eq!(xv.rank(), 1, "tmatvec expects rank-1 x");
        assert_eq!(av.rows(), xv.len(), "tmatvec dim mismatch");
        let n = av.cols();
        let mut out = vec![0.0; n];
        for i in 0..av.rows() {
            axpy(&mut out, xv.data()[i], av.row(i));
        }
        let w = self.any_wants(&[a, x]);
        self.push(Op::TMatVec(a, x), Tensor::vector(out), w)
    }

    pub fn dot(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let (xv, yv) = (self.value(x), self.value(y));
        assert_eq!(xv.len(), yv.len(), "dot length mismatch");
        let v = dot(xv.data(), yv.data());
        let w = self.any_wants(&[x, y]);
        self.push(Op::Dot(x, y), Tensor::scalar(v), w)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_elementwise(self.value(a), self.value(b), |x, y| x + y);
        let w = self.any_wants(&[a, b]);
        self.push(Op::Add(a, b), v, w)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_elementwise(self.value(a), self.value(b), |x, y| x - y);
        let w = self.any_wants(&[a, b]);
        self.push(Op::Sub(a, b), v, w)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip_elementwise(self.value(a), self.value(b), |x, y| x * y);
        let w = self.any_wants(&[a, b]);
        self.push(Op::Mul(a, b), v, w)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x *= c;
        }
        let w = self.wants(a);
        self.push(Op::Scale(a, c), v, w)
    }

    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> NodeId {
        let (mv, bv) = (self.value(m), self.value(bias));
        assert_eq!(bv.rank(), 1);
        assert_eq!(mv.cols(), bv.len(), "add_bias width mismatch");
        let mut v = mv.clone();
        let cols = v.cols();
        for r in 0..v.rows() {
            for (o, b) in v.row_mut(r).iter_mut().zip(&bv.data()[..cols]) {
                *o += b;
            }
        }
        let w = self.any_wants(&[m, bias]);
        self.push(Op::AddBias(m, bias), v, w)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = map_elementwise(self.value(a), f64::tanh);
        let w = self.wants(a);
        self.push(Op::Tanh(a), v, w)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map_elementwise(self.value(a), sigmoid_stable);
        let w = self.wants(a);
        self.push(Op::Sigmoid(a), v, w)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = map_elementwise(self.value(a), |x| x.max(0.0));
        let w = self.wants(a);
        self.push(Op::Relu(a), v, w)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = map_elementwise(self.value(a), |x| if x > 0.0 { x } else { slope * x });
        let w = self.wants(a);
        self.push(Op::LeakyRelu(a, slope), v, w)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = map_elementwise(self.value(a), |x| if x > 0.0 { x } else { x.exp() - 1.0 });
        let w = self.wants(a);
        self.push(Op::Elu(a), v, w)
    }

    pub fn softmax_vec(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rank(), 1, "softmax_vec expects rank 1");
        let v = softmax_kernel(av.data()).expect("softmax: empty support");
        let w = self.wants(a);
        self.push(Op::SoftmaxVec(a), Tensor::vector(v), w)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rank(), 2);
        let mut v = av.clone();
        for r in 0..v.rows() {
            let s = softmax_kernel(av.row(r)).expect("softmax_rows: empty support");
            v.row_mut(r).copy_from_slice(&s);
        }
        let w = self.wants(a);
        self.push(Op::SoftmaxRows(a), v, w)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rank(), 2);
        let out: Vec<f64> = (0..av.rows()).map(|r| logsumexp(av.row(r))).collect();
        let w = self.wants(a);
        self.push(Op::LogSumExpRows(a), Tensor::vector(out), w)
    }

    /// Scale each row to unit L2 norm. Panics on a zero-norm row; callers
    /// that can receive degenerate data validate first.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = av.clone();
        let rows = if av.rank() == 2 { av.rows() } else { 1 };
        let cols = if av.rank() == 2 { av.cols() } else { av.len() };
        for r in 0..rows {
            let row = &mut v.data_mut()[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm > 0.0, "normalize_rows: degenerate zero-norm row {r}");
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
        let w = self.wants(a);
        self.push(Op::NormalizeRows(a), v, w)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data().iter().sum();
        let w = self.wants(a);
        self.push(Op::Sum(a), Tensor::scalar(v), w)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let v = av.data().iter().sum::<f64>() / av.len() as f64;
        let w = self.wants(a);
        self.push(Op::Mean(a), Tensor::scalar(v), w)
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let out: Vec<f64> = (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect();
        let w = self.any_wants(&[a, b]);
        self.push(Op::RowDot(a, b), Tensor::vector(out), w)
    }

    pub fn diag_part(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.rows(), av.cols(), "diag_part expects square");
        let out: Vec<f64> = (0..av.rows()).map(|r| av.get(r, r)).collect();
        let w = self.wants(a);
        self.push(Op::DiagPart(a), Tensor::vector(out), w)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(a).reshaped(shape);
        let w = self.wants(a);
        self.push(Op::Reshape(a), v, w)
    }

    pub fn concat_vecs(&mut self, parts: &[NodeId]) -> NodeId {
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(self.value(*p).rank(), 1, "concat_vecs expects rank-1 parts");
            data.extend_from_slice(self.value(*p).data());
        }
        let w = self.any_wants(parts);
        self.push(Op::ConcatVecs(parts.to_vec()), Tensor::vector(data), w)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            let c = pv.cols();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(pv.row(r));
            }
            off += c;
        }
        let w = self.any_wants(parts);
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(rows, total, out), w)
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let d = self.value(parts[0]).len();
        let mut out = Vec::with_capacity(parts.len() * d);
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rank(), 1, "stack_rows expects rank-1 parts");
            assert_eq!(pv.len(), d, "stack_rows width mismatch");
            out.extend_from_slice(pv.data());
        }
        let w = self.any_wants(parts);
        self.push(Op::StackRows(parts.to_vec()), Tensor::matrix(parts.len(), d, out), w)
    }

    pub fn gather_rows(&mut self, src: NodeId, ids: Arc<Vec<usize>>) -> NodeId {
        let sv = self.value(src);
        let v = if sv.rank() == 2 {
            let c = sv.cols();
            let mut out = Vec::with_capacity(ids.len() * c);
            for &i in ids.iter() {
                out.extend_from_slice(sv.row(i));
            }
            Tensor::matrix(ids.len(), c, out)
        } else {
            Tensor::vector(ids.iter().map(|&i| sv.data()[i]).collect())
        };
        let w = self.wants(src);
        self.push(Op::GatherRows(src, ids), v, w)
    }

    /// Softmax within each contiguous segment. `seg_ptr` holds segment
    /// boundaries: segment s covers `seg_ptr[s]..seg_ptr[s+1]`. Empty
    /// segments are allowed and produce no output entries.
    pub fn segment_softmax(&mut self, logits: NodeId, seg_ptr: Arc<Vec<usize>>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rank(), 1);
        assert_eq!(*seg_ptr.last().unwrap(), lv.len(), "seg_ptr must cover logits");
        let mut out = vec![0.0; lv.len()];
        for s in 0..seg_ptr.len() - 1 {
            let (lo, hi) = (seg_ptr[s], seg_ptr[s + 1]);
            if lo == hi {
                continue;
            }
            let sm = softmax_kernel(&lv.data()[lo..hi]).expect("segment_softmax: empty support");
            out[lo..hi].copy_from_slice(&sm);
        }
        let w = self.wants(logits);
        self.push(Op::SegmentSoftmax(logits, seg_ptr), Tensor::vector(out), w)
    }

    /// Per segment s: `out[s] = sum_{e in segment} weights[e] * rows[e]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: NodeId,
        rows: NodeId,
        seg_ptr: Arc<Vec<usize>>,
    ) -> NodeId {
        let (wv, rv) = (self.value(weights), self.value(rows));
        assert_eq!(wv.len(), rv.rows(), "weights/rows mismatch");
        assert_eq!(*seg_ptr.last().unwrap(), wv.len());
        let n_seg = seg_ptr.len() - 1;
        let d = rv.cols();
        let mut out = vec![0.0; n_seg * d];
        for s in 0..n_seg {
            for e in seg_ptr[s]..seg_ptr[s + 1] {
                axpy(&mut out[s * d..(s + 1) * d], wv.data()[e], rv.row(e));
            }
        }
        let w = self.any_wants(&[weights, rows]);
        self.push(
            Op::SegmentWeightedSum {
                weights,
                rows,
                seg_ptr,
            },
            Tensor::matrix(n_seg, d, out),
            w,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against fixed 0/1
    /// labels, computed in the numerically stable logits form.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, labels: Arc<Vec<f64>>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.len(), labels.len(), "labels length mismatch");
        let m = labels.len() as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let w = self.wants(logits);
        self.push(
            Op::BceWithLogitsMean(logits, labels),
            Tensor::scalar(total / m),
            w,
        )
    }

    /// Gradients of a scalar loss with respect to every grad-wanting node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        Ok(self.backward_seeded(loss, Tensor::scalar(1.0)))
    }

    /// Backward sweep seeded with an arbitrary upstream gradient for `node`.
    /// Used to chain independently evaluated graphs.
    pub fn backward_seeded(&self, node: NodeId, seed: Tensor) -> Gradients {
        assert_eq!(
            self.value(node).shape(),
            seed.shape(),
            "seed shape must match node shape"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[node.0] = Some(seed);
        for idx in (0..=node.0).rev() {
            if !self.nodes[idx].wants_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_vjp(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        if !self.wants(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(t) => t.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn apply_vjp(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = matmul_nt_kernel(g.data(), bv.data(), g.rows(), g.cols(), bv.rows());
                    self.accumulate(grads, *a, Tensor::matrix(av.rows(), av.cols(), da));
                }
                if self.wants(*b) {
                    let db = matmul_tn_kernel(av.data(), g.data(), av.rows(), av.cols(), g.cols());
                    self.accumulate(grads, *b, Tensor::matrix(bv.rows(), bv.cols(), db));
                }
            }
            Op::MatmulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = matmul_kernel(g.data(), bv.data(), g.rows(), g.cols(), bv.cols());
                    self.accumulate(grads, *a, Tensor::matrix(av.rows(), av.cols(), da));
                }
                if self.wants(*b) {
                    let db = matmul_tn_kernel(g.data(), av.data(), g.rows(), g.cols(), av.cols());
                    self.accumulate(grads, *b, Tensor::matrix(bv.rows(), bv.cols(), db));
                }
            }
            Op::MatVec(a, x) => {
                let (av, xv) = (self.value(*a), self.value(*x));
                if self.wants(*a) {
                    let mut da = Tensor::zeros_like(av);
                    for i in 0..av.rows() {
                        axpy(da.row_mut(i), g.data()[i], xv.data());
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for i in 0..av.rows() {
                        axpy(&mut dx, g.data()[i], av.row(i));
                    }
                    self.accumulate(grads, *x, Tensor::vector(dx));
                }
            }
            Op::TMatVec(a, x) => {
                let (av, xv) = (self.value(*a), self.value(*x));
                if self.wants(*a) {
                    let mut da = Tensor::zeros_like(av);
                    for i in 0..av.rows() {
                        axpy(da.row_mut(i), xv.data()[i], g.data());
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for (i, slot) in dx.iter_mut().enumerate() {
                        *slot = dot(av.row(i), g.data());
                    }
                    self.accumulate(grads, *x, Tensor::vector(dx));
                }
            }
            Op::Dot(x, yid) => {
                let (xv, yv) = (self.value(*x), self.value(*yid));
                let g0 = g.item();
                if self.wants(*x) {
                    let mut dx = yv.clone();
                    dx.scale_in_place(g0);
                    self.accumulate(grads, *x, dx.reshaped(xv.shape().to_vec()));
                }
                if self.wants(*yid) {
                    let mut dy = xv.clone();
                    dy.scale_in_place(g0);
                    self.accumulate(grads, *yid, dy.reshaped(yv.shape().to_vec()));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut nb = g.clone();
                nb.scale_in_place(-1.0);
                self.accumulate(grads, *b, nb);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_elementwise(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_elementwise(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let mut da = g.clone();
                da.scale_in_place(*c);
                self.accumulate(grads, *a, da);
            }
            Op::AddBias(m, bias) => {
                self.accumulate(grads, *m, g.clone());
                if self.wants(*bias) {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for r in 0..g.rows() {
                        axpy(&mut db, 1.0, g.row(r));
                    }
                    self.accumulate(grads, *bias, Tensor::vector(db));
                }
            }
            Op::Tanh(a) => {
                let da = zip_elementwise(g, y, |gi, yi| gi * (1.0 - yi * yi));
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = zip_elementwise(g, y, |gi, yi| gi * yi * (1.0 - yi));
                self.accumulate(grads, *a, da);
            }
            Op::Relu(a) => {
                let da = zip_elementwise(g, self.value(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let da =
                    zip_elementwise(g, self.value(*a), |gi, xi| if xi > 0.0 { gi } else { s * gi });
                self.accumulate(grads, *a, da);
            }
            Op::Elu(a) => {
                // y = exp(x) - 1 on the negative branch, so dy/dx = y + 1.
                let da = {
                    let xv = self.value(*a);
                    let mut out = g.clone();
                    for ((o, &xi), &yi) in out.data_mut().iter_mut().zip(xv.data()).zip(y.data()) {
                        *o *= if xi > 0.0 { 1.0 } else { yi + 1.0 };
                    }
                    out
                };
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxVec(a) => {
                let da = softmax_vjp(y.data(), g.data());
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::SoftmaxRows(a) => {
                let mut da = Tensor::zeros_like(y);
                for r in 0..y.rows() {
                    let row = softmax_vjp(y.row(r), g.row(r));
                    da.row_mut(r).copy_from_slice(&row);
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros_like(av);
                for r in 0..av.rows() {
                    let sm = softmax_kernel(av.row(r)).expect("lse backward");
                    let gr = g.data()[r];
                    for (o, s) in da.row_mut(r).iter_mut().zip(&sm) {
                        *o = gr * s;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::NormalizeRows(a) => {
                let av = self.value(*a);
                let rows = if av.rank() == 2 { av.rows() } else { 1 };
                let cols = if av.rank() == 2 { av.cols() } else { av.len() };
                let mut da = Tensor::zeros_like(av);
                for r in 0..rows {
                    let x = &av.data()[r * cols..(r + 1) * cols];
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gy = dot(gr, yr);
                    for ((o, &gi), &yi) in da.data_mut()[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(gr)
                        .zip(yr)
                    {
                        *o = (gi - gy * yi) / norm;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros_like(av);
                let g0 = g.item();
                for o in da.data_mut() {
                    *o = g0;
                }
                self.accumulate(grads, *a, da);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros_like(av);
                let g0 = g.item() / av.len() as f64;
                for o in da.data_mut() {
                    *o = g0;
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros_like(av);
                    for r in 0..av.rows() {
                        axpy(da.row_mut(r), g.data()[r], bv.row(r));
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros_like(bv);
                    for r in 0..bv.rows() {
                        axpy(db.row_mut(r), g.data()[r], av.row(r));
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::DiagPart(a) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros_like(av);
                for r in 0..av.rows() {
                    da.set(r, r, g.data()[r]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Reshape(a) => {
                let da = g.reshaped(self.value(*a).shape().to_vec());
                self.accumulate(grads, *a, da);
            }
            Op::ConcatVecs(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if self.wants(*p) {
                        let da = Tensor::vector(g.data()[off..off + n].to_vec());
                        self.accumulate(grads, *p, da);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut da = vec![0.0; rows * c];
                        for r in 0..rows {
                            da[r * c..(r + 1) * c]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        self.accumulate(grads, *p, Tensor::matrix(rows, c, da));
                    }
                    off += c;
                }
            }
            Op::StackRows(parts) => {
                for (r, p) in parts.iter().enumerate() {
                    if self.wants(*p) {
                        self.accumulate(grads, *p, Tensor::vector(g.row(r).to_vec()));
                    }
                }
            }
            Op::GatherRows(src, ids) => {
                let sv = self.value(*src);
                if !self.wants(*src) {
                    return;
                }
                let mut da = Tensor::zeros_like(sv);
                if sv.rank() == 2 {
                    for (k, &i) in ids.iter().enumerate() {
                        axpy(da.row_mut(i), 1.0, g.row(k));
                    }
                } else {
                    for (k, &i) in ids.iter().enumerate() {
                        da.data_mut()[i] += g.data()[k];
                    }
                }
                self.accumulate(grads, *src, da);
            }
            Op::SegmentSoftmax(a, seg_ptr) => {
                let mut da = vec![0.0; y.len()];
                for s in 0..seg_ptr.len() - 1 {
                    let (lo, hi) = (seg_ptr[s], seg_ptr[s + 1]);
                    if lo == hi {
                        continue;
                    }
                    let part = softmax_vjp(&y.data()[lo..hi], &g.data()[lo..hi]);
                    da[lo..hi].copy_from_slice(&part);
                }
                self.accumulate(grads, *a, Tensor::vector(da));
            }
            Op::SegmentWeightedSum {
                weights,
                rows,
                seg_ptr,
            } => {
                let (wv, rv) = (self.value(*weights), self.value(*rows));
                if self.wants(*weights) {
                    let mut dw = vec![0.0; wv.len()];
                    for s in 0..seg_ptr.len() - 1 {
                        for e in seg_ptr[s]..seg_ptr[s + 1] {
                            dw[e] = dot(g.row(s), rv.row(e));
                        }
                    }
                    self.accumulate(grads, *weights, Tensor::vector(dw));
                }
                if self.wants(*rows) {
                    let mut dr = Tensor::zeros_like(rv);
                    for s in 0..seg_ptr.len() - 1 {
                        for e in seg_ptr[s]..seg_ptr[s + 1] {
                            axpy(dr.row_mut(e), wv.data()[e], g.row(s));
                        }
                    }
                    self.accumulate(grads, *rows, dr);
                }
            }
            Op::BceWithLogitsMean(logits, labels) => {
                let lv = self.value(*logits);
                let m = labels.len() as f64;
                let g0 = g.item();
                let da: Vec<f64> = lv
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&x, &t)| g0 * (sigmoid_stable(x) - t) / m)
                    .collect();
                self.accumulate(
                    grads,
                    *logits,
                    Tensor::new(lv.shape().to_vec(), da),
                );
            }
        }
    }
}

/// Stable sigmoid.
pub fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax. Entries of `-inf` map to exactly zero; an input
/// whose entries are all `-inf` (or empty) has no support and is an error.
pub fn softmax_kernel(v: &[f64]) -> Result<Vec<f64>> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::invalid("softmax: empty support"));
    }
    let mut out: Vec<f64> = v
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
        .collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    Ok(out)
}

/// Max-subtracted log-sum-exp; `-inf` entries contribute nothing.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(max.is_finite(), "logsumexp: empty support");
    let s: f64 = v
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
        .sum();
    max + s.ln()
}

fn softmax_vjp(y: &[f64], g: &[f64]) -> Vec<f64> {
    let gy = dot(g, y);
    y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - gy)).collect()
}

fn map_elementwise(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip_elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// C(m,n) = A(m,k) * B(k,n), i-k-j loop order so the inner loop streams rows.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(crow, aip, &b[p * n..(p + 1) * n]);
        }
    }
    c
}

/// C(m,n) = A(m,k) * B(n,k)^T — rows of both operands are contiguous.
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// C(k,n)... C = A(m,k)^T * B(m,n), accumulated row by row.
fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(&mut c[p * n..(p + 1) * n], a[i * k + p], brow);
        }
    }
    c
}
