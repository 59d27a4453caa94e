//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Forward values are computed eagerly as operations are recorded; `backward`
//! walks the tape once in reverse. Sparse operands enter either as constants
//! ([`Tape::spmm_const`]) or as a fixed pattern whose values are themselves a
//! tape node ([`Tape::spmm_valued`]), which is how gradients reach the tokens
//! through the retained kNN similarities.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::csr::CsrMatrix;
use crate::dense::{dot, DenseMatrix, ZERO_ROW_NORM};
use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    SpmmConst(Arc<CsrMatrix>, usize),
    SpmmValued {
        pattern: Arc<CsrMatrix>,
        values: usize,
        x: usize,
    },
    EdgeDot {
        pattern: Arc<CsrMatrix>,
        a: usize,
        b: usize,
    },
    Hadamard(usize, usize),
    RowMul {
        x: usize,
        row: usize,
    },
    ScalarMul {
        x: usize,
        s: usize,
    },
    Add(usize, usize),
    AddRow {
        x: usize,
        row: usize,
    },
    Affine {
        x: usize,
        mul: f64,
    },
    ConcatCols(usize, usize),
    Relu(usize),
    Elu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    L2RowNormalize {
        x: usize,
        norms: Vec<f64>,
    },
    LogSoftmaxRows(usize),
    SoftmaxRows(usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    PickPerRow {
        x: usize,
        cols: Vec<usize>,
    },
    WeightedLseRows {
        x: usize,
        weights: Arc<CsrMatrix>,
    },
    RsqrtClamped {
        x: usize,
        eps: f64,
    },
    LnClamped {
        x: usize,
        floor: f64,
    },
    Mean(usize),
    Sum(usize),
    Neg(usize),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Gradients of trainable leaves, keyed by node id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<NodeId, DenseMatrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &DenseMatrix)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Append-only operation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_signature: u64,
    at_kink: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_signature: FNV_OFFSET,
            at_kink: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise branch taken so far (ReLU gates, clamps,
    /// zero-row cut-offs). Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    /// True once any piecewise op saw an input exactly on its breakpoint.
    pub fn at_kink(&self) -> bool {
        self.at_kink
    }

    fn mark_branches(&mut self, branches: impl Iterator<Item = bool>) {
        let mut h = self.kink_signature;
        for b in branches {
            h ^= b as u64 + 1;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.kink_signature = h;
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: DenseMatrix) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: DenseMatrix, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, inputs: &[usize]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn v(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).matmul(self.v(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).matmul_t(self.v(b))?;
        Ok(self.push(out, Op::MatMulT(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.v(a).transpose();
        self.push(out, Op::Transpose(a.0), &[a.0])
    }

    /// `s · x` with a constant sparse `s`.
    pub fn spmm_const(&mut self, s: Arc<CsrMatrix>, x: NodeId) -> Result<NodeId> {
        let out = s.spmm(self.v(x))?;
        Ok(self.push(out, Op::SpmmConst(s, x.0), &[x.0]))
    }

    /// Sparse · dense where the sparse values come from the `nnz x 1` node `values`.
    pub fn spmm_valued(&mut self, pattern: Arc<CsrMatrix>, values: NodeId, x: NodeId) -> Result<NodeId> {
        let vals = self.v(values);
        if vals.shape() != (pattern.nnz(), 1) {
            return Err(Error::shape(
                "spmm_valued",
                format!("{:?} values for {} stored entries", vals.shape(), pattern.nnz()),
            ));
        }
        let s = pattern.with_values(vals.data().to_vec())?;
        let out = s.spmm(self.v(x))?;
        Ok(self.push(
            out,
            Op::SpmmValued {
                pattern,
                values: values.0,
                x: x.0,
            },
            &[values.0, x.0],
        ))
    }

    /// `out[e] = <a_i, b_j>` for every stored entry `e = (i, j)` of `pattern`.
    pub fn edge_dot(&mut self, pattern: Arc<CsrMatrix>, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.v(a), self.v(b));
        if av.cols() != bv.cols() || av.rows() != pattern.n_rows() || bv.rows() != pattern.n_cols() {
            return Err(Error::shape(
                "edge_dot",
                format!(
                    "pattern {}x{} with operands {:?}, {:?}",
                    pattern.n_rows(),
                    pattern.n_cols(),
                    av.shape(),
                    bv.shape()
                ),
            ));
        }
        let out: Vec<f64> = pattern.iter().map(|(i, j, _)| dot(av.row(i), bv.row(j))).collect();
        let out = DenseMatrix::from_vec(out.len(), 1, out);
        Ok(self.push(
            out,
            Op::EdgeDot {
                pattern,
                a: a.0,
                b: b.0,
            },
            &[a.0, b.0],
        ))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).hadamard(self.v(b))?;
        Ok(self.push(out, Op::Hadamard(a.0, b.0), &[a.0, b.0]))
    }

    /// Multiplies every row of `x` element-wise by the `1 x c` node `row`.
    pub fn row_broadcast_mul(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let r = self.v(row);
        if r.rows() != 1 {
            return Err(Error::shape("row_broadcast_mul", "broadcast operand must be 1 x c"));
        }
        let out = self.v(x).mul_row_broadcast(r.data())?;
        Ok(self.push(out, Op::RowMul { x: x.0, row: row.0 }, &[x.0, row.0]))
    }

    /// `s · x` with `s` a 1x1 node.
    pub fn scalar_mul(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("scalar_mul", "scale operand must be 1 x 1"));
        }
        let out = self.v(x).scale(self.v(s).item());
        Ok(self.push(out, Op::ScalarMul { x: x.0, s: s.0 }, &[x.0, s.0]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).add(self.v(b))?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds the `1 x c` node `row` to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xv, r) = (self.v(x), self.v(row));
        if r.rows() != 1 || r.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("{:?} + row {:?}", xv.shape(), r.shape()),
            ));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x: x.0, row: row.0 }, &[x.0, row.0]))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.affine(x, s, 0.0)
    }

    /// `mul · x + add` element-wise.
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let out = self.v(x).map(|v| mul * v + add);
        self.push(out, Op::Affine { x: x.0, mul }, &[x.0])
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let out = self.v(x).map(|v| -v);
        self.push(out, Op::Neg(x.0), &[x.0])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.v(a).concat_cols(self.v(b))?;
        Ok(self.push(out, Op::ConcatCols(a.0, b.0), &[a.0, b.0]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.v(x);
        let out = xv.map(|v| if v > 0.0 { v } else { 0.0 });
        let hit = xv.data().iter().any(|&v| v == 0.0);
        let gates: Vec<bool> = xv.data().iter().map(|&v| v > 0.0).collect();
        self.at_kink |= hit;
        self.mark_branches(gates.into_iter());
        self.push(out, Op::Relu(x.0), &[x.0])
    }

    /// ELU with `α = 1`.
    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let out = self.v(x).map(|v| if v > 0.0 { v } else { math::expm1(v) });
        self.push(out, Op::Elu(x.0), &[x.0])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.v(x).map(math::tanh);
        self.push(out, Op::Tanh(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.v(x).map(math::sigmoid);
        self.push(out, Op::Sigmoid(x.0), &[x.0])
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, training: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {} outside [0, 1)", p)));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.v(x);
        let mask: Vec<f64> = (0..xv.data().len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = DenseMatrix::from_vec(
            xv.rows(),
            xv.cols(),
            xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        );
        Ok(self.push(out, Op::Dropout { x: x.0, mask }, &[x.0]))
    }

    /// Unit-L2 rows; rows with norm below 1e-12 map to zero rows with zero gradient.
    pub fn l2_row_normalize(&mut self, x: NodeId) -> NodeId {
        let (out, norms) = self.v(x).normalize_rows();
        self.mark_branches(norms.iter().map(|&n| n < ZERO_ROW_NORM));
        self.push(out, Op::L2RowNormalize { x: x.0, norms }, &[x.0])
    }

    /// Cosine similarity of every row of `a` against every row of `b`.
    pub fn cosine_similarity_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let an = self.l2_row_normalize(a);
        let bn = self.l2_row_normalize(b);
        self.matmul_t(an, bn)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.v(x);
        let mut out = xv.clone();
        for i in 0..xv.rows() {
            let lse = math::log_sum_exp(xv.row(i));
            out.row_mut(i).iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(x.0), &[x.0])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.v(x);
        let mut out = xv.clone();
        for i in 0..xv.rows() {
            let lse = math::log_sum_exp(xv.row(i));
            out.row_mut(i).iter_mut().for_each(|v| *v = math::exp(*v - lse));
        }
        self.push(out, Op::SoftmaxRows(x.0), &[x.0])
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let n = self.v(x).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Bounds { node: bad, n });
        }
        let out = self.v(x).gather_rows(idx);
        Ok(self.push(
            out,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        ))
    }

    /// `out[i] = x[i, cols[i]]` as an `n x 1` column.
    pub fn pick_per_row(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let xv = self.v(x);
        if cols.len() != xv.rows() || cols.iter().any(|&c| c >= xv.cols()) {
            return Err(Error::shape("pick_per_row", "one in-range column per row required"));
        }
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| xv.get(i, c)).collect();
        let out = DenseMatrix::from_vec(out.len(), 1, out);
        Ok(self.push(
            out,
            Op::PickPerRow {
                x: x.0,
                cols: cols.to_vec(),
            },
            &[x.0],
        ))
    }

    /// `out[m] = ln Σ_n w[m,n] exp(x[m,n])` over the positive stored weights of
    /// row `m`. Every row must carry at least one positive weight.
    pub fn weighted_lse_rows(&mut self, x: NodeId, weights: Arc<CsrMatrix>) -> Result<NodeId> {
        let xv = self.v(x);
        if weights.n_rows() != xv.rows() || weights.n_cols() != xv.cols() {
            return Err(Error::shape(
                "weighted_lse_rows",
                format!("weights {}x{} vs {:?}", weights.n_rows(), weights.n_cols(), xv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(xv.rows());
        for m in 0..xv.rows() {
            let (cols, w) = weights.row(m);
            let terms: Vec<f64> = cols
                .iter()
                .zip(w)
                .filter(|(_, &w)| w > 0.0)
                .map(|(&n, &w)| math::ln(w) + xv.get(m, n))
                .collect();
            if terms.is_empty() {
                return Err(Error::Contract(format!("row {} has no positive weight", m)));
            }
            out.push(math::log_sum_exp(&terms));
        }
        let out = DenseMatrix::from_vec(out.len(), 1, out);
        Ok(self.push(out, Op::WeightedLseRows { x: x.0, weights }, &[x.0]))
    }

    /// `1 / sqrt(max(x, eps))`.
    pub fn rsqrt_clamped(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.v(x);
        let out = xv.map(|v| 1.0 / math::sqrt(v.max(eps)));
        let hit = xv.data().iter().any(|&v| v == eps);
        let branches: Vec<bool> = xv.data().iter().map(|&v| v > eps).collect();
        self.at_kink |= hit;
        self.mark_branches(branches.into_iter());
        self.push(out, Op::RsqrtClamped { x: x.0, eps }, &[x.0])
    }

    /// `ln(max(x, floor))`.
    pub fn ln_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        let xv = self.v(x);
        let out = xv.map(|v| math::ln(v.max(floor)));
        let hit = xv.data().iter().any(|&v| v == floor);
        let branches: Vec<bool> = xv.data().iter().map(|&v| v > floor).collect();
        self.at_kink |= hit;
        self.mark_branches(branches.into_iter());
        self.push(out, Op::LnClamped { x: x.0, floor }, &[x.0])
    }

    pub fn mean_scalar(&mut self, x: NodeId) -> NodeId {
        let xv = self.v(x);
        let n = xv.data().len().max(1) as f64;
        let out = DenseMatrix::scalar(xv.sum() / n);
        self.push(out, Op::Mean(x.0), &[x.0])
    }

    pub fn sum_scalar(&mut self, x: NodeId) -> NodeId {
        let out = DenseMatrix::scalar(self.v(x).sum());
        self.push(out, Op::Sum(x.0), &[x.0])
    }

    /// Reverse sweep from a 1x1 loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if node.trainable {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.trainable {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| DenseMatrix::zeros(node.value.rows(), node.value.cols()));
                map.insert(NodeId(idx), g);
            }
        }
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.trainable {
                map.insert(NodeId(idx), DenseMatrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { map })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<DenseMatrix>], i: usize, g: DenseMatrix) {
        if !self.wants(i) {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(val(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, val(*a).t_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.t_matmul(val(*a))?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SpmmConst(s, x) => self.accumulate(grads, *x, s.spmm_transposed(g)?),
            Op::SpmmValued { pattern, values, x } => {
                let xv = val(*x);
                if self.wants(*values) {
                    let gv: Vec<f64> = pattern.iter().map(|(i, j, _)| dot(g.row(i), xv.row(j))).collect();
                    self.accumulate(grads, *values, DenseMatrix::from_vec(gv.len(), 1, gv));
                }
                if self.wants(*x) {
                    let s = pattern.with_values(val(*values).data().to_vec())?;
                    self.accumulate(grads, *x, s.spmm_transposed(g)?);
                }
            }
            Op::EdgeDot { pattern, a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = DenseMatrix::zeros(av.rows(), av.cols());
                let mut gb = DenseMatrix::zeros(bv.rows(), bv.cols());
                for (e, (i, j, _)) in pattern.iter().enumerate() {
                    let ge = g.data()[e];
                    if ge == 0.0 {
                        continue;
                    }
                    for (o, &bj) in ga.row_mut(i).iter_mut().zip(bv.row(j)) {
                        *o += ge * bj;
                    }
                    for (o, &ai) in gb.row_mut(j).iter_mut().zip(av.row(i)) {
                        *o += ge * ai;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(val(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(val(*a))?);
                }
            }
            Op::RowMul { x, row } => {
                let r = val(*row);
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.mul_row_broadcast(r.data())?);
                }
                if self.wants(*row) {
                    let xv = val(*x);
                    let mut gr = DenseMatrix::zeros(1, r.cols());
                    for i in 0..g.rows() {
                        for ((o, &gi), &xi) in gr.data_mut().iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                            *o += gi * xi;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::ScalarMul { x, s } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.scale(val(*s).item()));
                }
                if self.wants(*s) {
                    let gs = dot(g.data(), val(*x).data());
                    self.accumulate(grads, *s, DenseMatrix::scalar(gs));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*row) {
                    let sums: Vec<f64> = (0..g.cols()).map(|j| (0..g.rows()).map(|i| g.get(i, j)).sum()).collect();
                    self.accumulate(grads, *row, DenseMatrix::from_vec(1, sums.len(), sums));
                }
            }
            Op::Affine { x, mul } => self.accumulate(grads, *x, g.scale(*mul)),
            Op::Neg(x) => self.accumulate(grads, *x, g.scale(-1.0)),
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let ga = DenseMatrix::from_fn(g.rows(), ca, |i, j| g.get(i, j));
                let gb = DenseMatrix::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Elu(x) => {
                let gx = DenseMatrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(val(*x).data())
                        .zip(y.data())
                        .map(|((&gi, &xi), &yi)| if xi > 0.0 { gi } else { gi * (yi + 1.0) })
                        .collect(),
                );
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => self.accumulate(grads, *x, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?),
            Op::Sigmoid(x) => self.accumulate(grads, *x, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))?),
            Op::Dropout { x, mask } => {
                let gx = DenseMatrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(mask).map(|(a, b)| a * b).collect(),
                );
                self.accumulate(grads, *x, gx);
            }
            Op::L2RowNormalize { x, norms } => {
                let mut gx = DenseMatrix::zeros(g.rows(), g.cols());
                for (i, &n) in norms.iter().enumerate() {
                    if n < ZERO_ROW_NORM {
                        continue;
                    }
                    let yg = dot(y.row(i), g.row(i));
                    for ((o, &gi), &yi) in gx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = (gi - yi * yg) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut gx = g.clone();
                for i in 0..g.rows() {
                    let gs: f64 = g.row(i).iter().sum();
                    for (o, &yi) in gx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *o -= math::exp(yi) * gs;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = g.clone();
                for i in 0..g.rows() {
                    let gy = dot(g.row(i), y.row(i));
                    for (o, &yi) in gx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *o = yi * (*o - gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let mut gx = DenseMatrix::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &gi) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gi;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PickPerRow { x, cols } => {
                let xv = val(*x);
                let mut gx = DenseMatrix::zeros(xv.rows(), xv.cols());
                for (i, &c) in cols.iter().enumerate() {
                    gx.set(i, c, g.data()[i]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::WeightedLseRows { x, weights } => {
                let xv = val(*x);
                let mut gx = DenseMatrix::zeros(xv.rows(), xv.cols());
                for m in 0..xv.rows() {
                    let gm = g.data()[m];
                    let ym = y.data()[m];
                    let (cols, w) = weights.row(m);
                    for (&n, &w) in cols.iter().zip(w) {
                        if w > 0.0 {
                            gx.set(m, n, gm * w * math::exp(xv.get(m, n) - ym));
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RsqrtClamped { x, eps } => {
                let gx = DenseMatrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(val(*x).data())
                        .zip(y.data())
                        .map(|((&gi, &xi), &yi)| if xi > *eps { -0.5 * gi * yi * yi * yi } else { 0.0 })
                        .collect(),
                );
                self.accumulate(grads, *x, gx);
            }
            Op::LnClamped { x, floor } => {
                let gx = g.zip_map(val(*x), |gi, xi| if xi > *floor { gi / xi } else { 0.0 })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let n = xv.data().len().max(1) as f64;
                self.accumulate(grads, *x, DenseMatrix::filled(xv.rows(), xv.cols(), g.item() / n));
            }
            Op::Sum(x) => {
                let xv = val(*x);
                self.accumulate(grads, *x, DenseMatrix::filled(xv.rows(), xv.cols(), g.item()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut t = Tape::new();
        let x = t.param(DenseMatrix::from_rows(&[[-1.0, 2.0]]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
        let s = t.sum_scalar(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut t = Tape::new();
        let a = t.param(DenseMatrix::filled(2, 2, 1.0));
        let b = t.param(DenseMatrix::filled(2, 2, 2.0));
        let c = t.concat_cols(a, b).unwrap();
        assert_eq!(t.shape(c), (2, 4));
        let w = t.constant(DenseMatrix::from_fn(2, 4, |i, j| (i * 4 + j) as f64));
        let p = t.hadamard(c, w).unwrap();
        let s = t.sum_scalar(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn cosine_of_identical_unit_rows_is_one() {
        let mut t = Tape::new();
        let a = t.constant(DenseMatrix::from_rows(&[[0.6, 0.8]]).unwrap());
        let c = t.cosine_similarity_matrix(a, a).unwrap();
        assert!((t.value(c).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(DenseMatrix::scalar(3.0));
        let sq = t.hadamard(x, x).unwrap();
        let m = t.mean_scalar(sq);
        assert_eq!(t.backward(m).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(DenseMatrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_probability_validated() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t.param(DenseMatrix::zeros(2, 1));
        assert!(matches!(t.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(matches!(t.dropout(x, -0.1, true, &mut rng), Err(Error::Config(_))));
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_l2_rows_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(rand_matrix(&mut rng, 6, 5).scale(20.0));
        let ls = t.log_softmax_rows(x);
        for i in 0..6 {
            let s: f64 = t.value(ls).row(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let n = t.l2_row_normalize(x);
        for norm in t.value(n).row_norms() {
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = rand_matrix(&mut rng, 3, 4);
        let x0 = rand_matrix(&mut rng, 4, 2);
        let run = || {
            let mut t = Tape::new();
            let w = t.param(w0.clone());
            let x = t.constant(x0.clone());
            let p = t.matmul(w, x).unwrap();
            let e = t.elu(p);
            let s = t.sum_scalar(e);
            t.backward(s).unwrap().get(w).unwrap().clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn sum_of_matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_matrix(&mut rng, 3, 4);
        let x = rand_matrix(&mut rng, 4, 2);
        let report = grad_check(
            |t, p| {
                let xc = t.constant(x.clone());
                let m = t.matmul(p[0], xc)?;
                Ok(t.sum_scalar(m))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn reused_parameter_sums_path_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = rand_matrix(&mut rng, 3, 3);
        let report = grad_check(
            |t, p| {
                let a = t.matmul(p[0], p[0])?;
                let b = t.tanh(p[0]);
                let c = t.hadamard(a, b)?;
                Ok(t.sum_scalar(c))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{:?}", report);
    }

    #[test]
    fn quadratic_is_nearly_exact() {
        let w = DenseMatrix::from_rows(&[[0.3, -1.2], [2.0, 0.7]]).unwrap();
        let report = grad_check(
            |t, p| {
                let sq = t.hadamard(p[0], p[0])?;
                Ok(t.sum_scalar(sq))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{:?}", report);
    }

    #[test]
    fn relu_kink_coordinates_are_skipped() {
        let w = DenseMatrix::from_rows(&[[0.0, 1.5, -0.5]]).unwrap();
        let report = grad_check(
            |t, p| {
                let r = t.relu(p[0]);
                Ok(t.sum_scalar(r))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.sampled, 2);
        assert!(report.max_rel_err < 1e-9);
    }

    /// Random operands for one trial of the per-op gradient check.
    struct Operands {
        a: DenseMatrix,
        b: DenseMatrix,
        right: DenseMatrix,
        row: DenseMatrix,
        scalar: DenseMatrix,
        positive: DenseMatrix,
        /// Square pattern with its values as a column.
        square: Arc<CsrMatrix>,
        square_values: DenseMatrix,
        /// Non-negative rectangular matrix, for constant propagation.
        sparse: Arc<CsrMatrix>,
        /// Positive weights with at least one entry per row.
        lse_weights: Arc<CsrMatrix>,
        /// Upstream weights for the scalar reduction.
        upstream: DenseMatrix,
    }

    impl Operands {
        fn new(rng: &mut ChaCha8Rng, r: usize, c: usize, trial: usize) -> Self {
            let a = rand_matrix(rng, r, c);
            let b = rand_matrix(rng, r, c);
            let right = rand_matrix(rng, c, 3);
            let row = rand_matrix(rng, 1, c);
            let scalar = rand_matrix(rng, 1, 1);
            let positive = a.map(|v| v.abs() + 0.5);
            let square = Arc::new(CsrMatrix::from_dense(&DenseMatrix::from_fn(r, r, |i, j| {
                if (i + j + trial) % 3 != 0 { 1.0 } else { 0.0 }
            })));
            let square_values = rand_matrix(rng, square.nnz(), 1);
            let sparse = Arc::new(CsrMatrix::from_dense(&rand_matrix(rng, r, r).map(|v| v.max(0.0))));
            let lse_rows = (0..r)
                .map(|i| {
                    let mut entries: Vec<(usize, f64)> = (0..c)
                        .filter(|&j| (i * 5 + j) % 3 != 0)
                        .map(|j| (j, 0.1 + rng.random::<f64>()))
                        .collect();
                    if entries.is_empty() {
                        entries.push((0, 0.7));
                    }
                    entries
                })
                .collect();
            let lse_weights = Arc::new(CsrMatrix::from_rows(c, lse_rows).unwrap());
            let upstream = rand_matrix(rng, 8, 8);
            Self { a, b, right, row, scalar, positive, square, square_values, sparse, lse_weights, upstream }
        }

        /// Weighted sum so each op sees a non-uniform upstream gradient.
        fn reduce(&self, t: &mut Tape, x: NodeId) -> Result<NodeId> {
            let (r, c) = t.shape(x);
            let w = t.constant(DenseMatrix::from_fn(r, c, |i, j| self.upstream.get(i % 8, j % 8) + 0.1 * (i + j) as f64));
            let h = t.hadamard(x, w)?;
            Ok(t.sum_scalar(h))
        }
    }

    type Build = fn(&mut Tape, &[NodeId], &Operands) -> Result<NodeId>;

    fn cases(o: &Operands) -> Vec<(&'static str, Vec<DenseMatrix>, Build)> {
        let (a, b) = (o.a.clone(), o.b.clone());
        vec![
            ("matmul", vec![a.clone(), o.right.clone()], |t, p, _| t.matmul(p[0], p[1])),
            ("matmul_t", vec![a.clone(), b.clone()], |t, p, _| t.matmul_t(p[0], p[1])),
            ("transpose", vec![a.clone()], |t, p, _| Ok(t.transpose(p[0]))),
            ("spmm_const", vec![a.clone()], |t, p, o| t.spmm_const(o.sparse.clone(), p[0])),
            ("spmm_valued", vec![o.square_values.clone(), a.clone()], |t, p, o| t.spmm_valued(o.square.clone(), p[0], p[1])),
            ("edge_dot", vec![a.clone(), b.clone()], |t, p, o| t.edge_dot(o.square.clone(), p[0], p[1])),
            ("hadamard", vec![a.clone(), b.clone()], |t, p, _| t.hadamard(p[0], p[1])),
            ("row_broadcast_mul", vec![a.clone(), o.row.clone()], |t, p, _| t.row_broadcast_mul(p[0], p[1])),
            ("scalar_mul", vec![a.clone(), o.scalar.clone()], |t, p, _| t.scalar_mul(p[0], p[1])),
            ("add", vec![a.clone(), b.clone()], |t, p, _| t.add(p[0], p[1])),
            ("add_row_broadcast", vec![a.clone(), o.row.clone()], |t, p, _| t.add_row_broadcast(p[0], p[1])),
            ("affine", vec![a.clone()], |t, p, _| Ok(t.affine(p[0], -1.7, 0.3))),
            ("neg", vec![a.clone()], |t, p, _| Ok(t.neg(p[0]))),
            ("concat_cols", vec![a.clone(), b.clone()], |t, p, _| t.concat_cols(p[0], p[1])),
            ("relu", vec![a.clone()], |t, p, _| Ok(t.relu(p[0]))),
            ("elu", vec![a.clone()], |t, p, _| Ok(t.elu(p[0]))),
            ("tanh", vec![a.clone()], |t, p, _| Ok(t.tanh(p[0]))),
            ("sigmoid", vec![a.clone()], |t, p, _| Ok(t.sigmoid(p[0]))),
            ("l2_row_normalize", vec![a.clone()], |t, p, _| Ok(t.l2_row_normalize(p[0]))),
            ("cosine_similarity_matrix", vec![a.clone(), b.clone()], |t, p, _| t.cosine_similarity_matrix(p[0], p[1])),
            ("log_softmax_rows", vec![a.clone()], |t, p, _| Ok(t.log_softmax_rows(p[0]))),
            ("softmax_rows", vec![a.clone()], |t, p, _| Ok(t.softmax_rows(p[0]))),
            ("gather_rows", vec![a.clone()], |t, p, _| {
                let n = t.shape(p[0]).0;
                let idx: Vec<usize> = (0..n).rev().chain(0..1).collect();
                t.gather_rows(p[0], &idx)
            }),
            ("pick_per_row", vec![a.clone()], |t, p, _| {
                let (n, k) = t.shape(p[0]);
                let cols: Vec<usize> = (0..n).map(|i| (i * 7) % k).collect();
                t.pick_per_row(p[0], &cols)
            }),
            ("weighted_lse_rows", vec![a.clone()], |t, p, o| t.weighted_lse_rows(p[0], o.lse_weights.clone())),
            ("rsqrt_clamped", vec![o.positive.clone()], |t, p, _| Ok(t.rsqrt_clamped(p[0], 1e-12))),
            ("ln_clamped", vec![o.positive.clone()], |t, p, _| Ok(t.ln_clamped(p[0], 1e-12))),
            ("mean_scalar", vec![a.clone()], |t, p, _| Ok(t.mean_scalar(p[0]))),
            // a fixed seed gives the same mask on every evaluation
            ("dropout", vec![a], |t, p, _| t.dropout(p[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(0))),
        ]
    }

    /// Every op's backward rule against central differences on random shapes.
    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..6 {
            let operands = Operands::new(&mut rng, 2 + trial % 4, 2 + (trial * 3) % 5, trial);
            for (name, params, build) in cases(&operands) {
                let report = grad_check(
                    |t, p| {
                        let out = build(t, p, &operands)?;
                        operands.reduce(t, out)
                    },
                    &params,
                    1e-5,
                )
                .unwrap();
                assert!(report.max_rel_err < 1e-6, "{} (trial {}): {:?}", name, trial, report);
            }
        }
    }
}
