//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! The graph is define-by-run: every loss evaluation builds a fresh [`Graph`],
//! appends nodes in topological order and is consumed by a single call to
//! [`Graph::backward`]. Forward arithmetic lives in [`kernels`] so that
//! value-only code paths (rollouts, indexing) produce bit-identical numbers
//! to the differentiable path.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Sentinel written into masked positions of a log-softmax.
pub const MASK_SENTINEL: f64 = -1e30;

/// Norms below this are rejected by [`Graph::unit_normalize`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("array contains non-finite values")]
    NonFinite,
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("vector norm {0:e} is too close to zero to normalize")]
    NearZeroNorm(f64),
    #[error("every entry of the softmax input is masked")]
    AllMasked,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph was already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStep(f64),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Dense row-major array of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Array {
    /// Checked constructor: the shape must hold exactly `data.len()` values
    /// and every value must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::BadShape {
                shape,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite);
        }
        Ok(Self { shape, data })
    }

    /// Unchecked constructor used for intermediate results.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1, 1], vec![value])
    }

    /// A `1×n` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![1, data.len()], data)
    }

    /// Builds an `m×n` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(AutodiffError::ShapeMismatch {
                op: "from_rows",
                left: vec![n],
                right: vec![bad.len()],
            });
        }
        Self::new(
            vec![rows.len(), n],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D array (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count of a 2-D array.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Array) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Forward arithmetic shared by the graph and by value-only callers.
pub mod kernels {
    use super::{Array, MASK_SENTINEL};

    /// `(m×n)·(n×p)`; inner sums run in increasing index order.
    pub fn matmul(a: &Array, b: &Array) -> Array {
        let (m, n, p) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let arow = a.row_slice(i);
            for j in 0..p {
                let mut acc = 0.0;
                for (l, av) in arow.iter().enumerate().take(n) {
                    acc += av * b.data()[l * p + j];
                }
                out[i * p + j] = acc;
            }
        }
        Array::raw(vec![m, p], out)
    }

    /// `1×n` vector times the transpose of an `m×n` matrix, i.e. one dot
    /// product per row of `rows`. Same summation order as [`matmul`].
    pub fn dot_rows(v: &[f64], rows: &Array) -> Vec<f64> {
        (0..rows.rows())
            .map(|r| dot(v, rows.row_slice(r)))
            .collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    pub fn row_mean(a: &Array) -> Array {
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(a.row_slice(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Array::raw(vec![1, n], out)
    }

    pub fn gather_rows(table: &Array, ids: &[usize]) -> Array {
        let d = table.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(table.row_slice(id));
        }
        Array::raw(vec![ids.len(), d], out)
    }

    pub fn norm(v: &[f64]) -> f64 {
        dot(v, v).sqrt()
    }

    pub fn unit_normalize(v: &Array) -> (Array, f64) {
        let n = norm(v.data());
        let data = v.data().iter().map(|x| x / n).collect();
        (Array::raw(v.shape().to_vec(), data), n)
    }

    /// Log-softmax of `scores / temperature` restricted to unmasked entries.
    /// `mask[i] == true` excludes entry `i`; excluded outputs hold the sentinel.
    pub fn masked_log_softmax(scores: &[f64], mask: &[bool], temperature: f64) -> Vec<f64> {
        let z: Vec<f64> = scores
            .iter()
            .zip(mask)
            .map(|(s, &m)| if m { MASK_SENTINEL } else { s / temperature })
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (v, &m) in z.iter().zip(mask) {
            if !m {
                sum += (v - max).exp();
            }
        }
        let lse = max + sum.ln();
        z.iter()
            .zip(mask)
            .map(|(v, &m)| if m { MASK_SENTINEL } else { v - lse })
            .collect()
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    RowMean(NodeId),
    GatherRows(NodeId, Vec<usize>),
    UnitNormalize(NodeId, f64),
    Dot(NodeId, NodeId),
    MaskedLogSoftmax {
        input: NodeId,
        mask: Vec<bool>,
        temperature: f64,
    },
    Pick(NodeId, usize),
    Sum(NodeId),
    Add(Vec<NodeId>),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    Minimum(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array,
    requires_grad: bool,
}

/// Gradients of every `requires_grad` leaf, keyed by node id.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Array>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Array> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Array)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

/// Append-only computation graph. Single owner, single use.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Array, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, values: Array, requires_grad: bool) -> Result<NodeId> {
        if !values.is_finite() {
            return Err(AutodiffError::NonFinite);
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            value: values,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = kernels::matmul(av, bv);
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rows() == 0 || av.is_empty() {
            return Err(AutodiffError::Empty("row_mean"));
        }
        let out = kernels::row_mean(av);
        Ok(self.push(Op::RowMean(a), out, &[a]))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let v = tv.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: v });
        }
        let out = kernels::gather_rows(tv, ids);
        Ok(self.push(Op::GatherRows(table, ids.to_vec()), out, &[table]))
    }

    pub fn unit_normalize(&mut self, v: NodeId) -> Result<NodeId> {
        let vv = self.value(v);
        let n = kernels::norm(vv.data());
        if n <= MIN_NORM {
            return Err(AutodiffError::NearZeroNorm(n));
        }
        let (out, n) = kernels::unit_normalize(vv);
        Ok(self.push(Op::UnitNormalize(v, n), out, &[v]))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = Array::raw(vec![1, 1], vec![kernels::dot(av.data(), bv.data())]);
        Ok(self.push(Op::Dot(a, b), out, &[a, b]))
    }

    /// `mask[i] == true` removes entry `i` from the normalization.
    pub fn masked_log_softmax(
        &mut self,
        scores: NodeId,
        mask: &[bool],
        temperature: f64,
    ) -> Result<NodeId> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(AutodiffError::InvalidTemperature(temperature));
        }
        let sv = self.value(scores);
        if sv.len() != mask.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_log_softmax",
                left: sv.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        if mask.iter().all(|&m| m) {
            return Err(AutodiffError::AllMasked);
        }
        let out = Array::raw(
            sv.shape().to_vec(),
            kernels::masked_log_softmax(sv.data(), mask, temperature),
        );
        Ok(self.push(
            Op::MaskedLogSoftmax {
                input: scores,
                mask: mask.to_vec(),
                temperature,
            },
            out,
            &[scores],
        ))
    }

    /// Selects one entry (flat index) as a scalar node.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let av = self.value(a);
        if index >= av.len() {
            return Err(AutodiffError::IndexOutOfRange {
                index,
                len: av.len(),
            });
        }
        let out = Array::raw(vec![1, 1], vec![av.data()[index]]);
        Ok(self.push(Op::Pick(a, index), out, &[a]))
    }

    /// Sum of all entries as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().sum();
        Ok(self.push(Op::Sum(a), Array::raw(vec![1, 1], vec![total]), &[a]))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let first = *terms.first().ok_or(AutodiffError::Empty("add"))?;
        let mut acc = self.value(first).clone();
        for &t in &terms[1..] {
            let tv = self.value(t);
            if tv.shape() != acc.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "add",
                    left: acc.shape().to_vec(),
                    right: tv.shape().to_vec(),
                });
            }
            acc.add_assign(tv);
        }
        Ok(self.push(Op::Add(terms.to_vec()), acc, terms))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let av = self.value(a);
        let out = Array::raw(
            av.shape().to_vec(),
            av.data().iter().map(|x| x * factor).collect(),
        );
        Ok(self.push(Op::Scale(a, factor), out, &[a]))
    }

    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        let av = self.value(a);
        let out = Array::raw(
            av.shape().to_vec(),
            av.data().iter().map(|x| x + offset).collect(),
        );
        Ok(self.push(Op::AddScalar(a), out, &[a]))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let out = Array::raw(
            av.shape().to_vec(),
            av.data().iter().map(|x| x.exp()).collect(),
        );
        Ok(self.push(Op::Exp(a), out, &[a]))
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes only inside the
    /// closed interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let av = self.value(a);
        let out = Array::raw(
            av.shape().to_vec(),
            av.data().iter().map(|x| x.clamp(lo, hi)).collect(),
        );
        Ok(self.push(Op::Clamp(a, lo, hi), out, &[a]))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "minimum",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = Array::raw(
            av.shape().to_vec(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x.min(*y))
                .collect(),
        );
        Ok(self.push(Op::Minimum(a, b), out, &[a, b]))
    }

    /// Reverse sweep from a scalar loss. Consumes the graph: a second call
    /// returns [`AutodiffError::GraphConsumed`].
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NotScalar(loss_shape));
        }
        self.consumed = true;

        let mut slots: Vec<Option<Array>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(Array::raw(loss_shape, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.propagate(idx, &g, &mut slots);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = slots[i]
                    .take()
                    .unwrap_or_else(|| Array::zeros(n.value.shape().to_vec()));
                (NodeId(i), g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, slots: &'a mut [Option<Array>], id: NodeId) -> Option<&'a mut Array> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let shape = self.nodes[id.0].value.shape().to_vec();
        Some(slots[id.0].get_or_insert_with(|| Array::zeros(shape)))
    }

    fn propagate(&self, idx: usize, g: &Array, slots: &mut [Option<Array>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n, p) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.slot(slots, *a) {
                    let d = ga.data_mut();
                    for i in 0..m {
                        for l in 0..n {
                            let mut acc = 0.0;
                            for j in 0..p {
                                acc += g.data()[i * p + j] * bv.data()[l * p + j];
                            }
                            d[i * n + l] += acc;
                        }
                    }
                }
                if let Some(gb) = self.slot(slots, *b) {
                    let d = gb.data_mut();
                    for l in 0..n {
                        for j in 0..p {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av.data()[i * n + l] * g.data()[i * p + j];
                            }
                            d[l * p + j] += acc;
                        }
                    }
                }
            }
            Op::RowMean(a) => {
                let m = self.value(*a).rows();
                if let Some(ga) = self.slot(slots, *a) {
                    let n = ga.cols();
                    let d = ga.data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g.data()[c] / m as f64;
                        }
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                if let Some(gt) = self.slot(slots, *table) {
                    let n = gt.cols();
                    let d = gt.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..n {
                            d[id * n + c] += g.data()[r * n + c];
                        }
                    }
                }
            }
            Op::UnitNormalize(v, norm) => {
                let y = &node.value;
                let yg = kernels::dot(y.data(), g.data());
                if let Some(gv) = self.slot(slots, *v) {
                    for ((o, gi), yi) in gv.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += (gi - yi * yg) / norm;
                    }
                }
            }
            Op::Dot(a, b) => {
                let s = g.item();
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                if let Some(ga) = self.slot(slots, *a) {
                    for (o, x) in ga.data_mut().iter_mut().zip(&bv) {
                        *o += s * x;
                    }
                }
                if let Some(gb) = self.slot(slots, *b) {
                    for (o, x) in gb.data_mut().iter_mut().zip(&av) {
                        *o += s * x;
                    }
                }
            }
            Op::MaskedLogSoftmax {
                input,
                mask,
                temperature,
            } => {
                let y = node.value.data();
                let gsum: f64 = g
                    .data()
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| !m)
                    .map(|(v, _)| v)
                    .sum();
                if let Some(gi) = self.slot(slots, *input) {
                    for (j, o) in gi.data_mut().iter_mut().enumerate() {
                        if mask[j] {
                            continue;
                        }
                        let p = y[j].exp();
                        *o += (g.data()[j] - p * gsum) / temperature;
                    }
                }
            }
            Op::Pick(a, index) => {
                if let Some(ga) = self.slot(slots, *a) {
                    ga.data_mut()[*index] += g.item();
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                if let Some(ga) = self.slot(slots, *a) {
                    for o in ga.data_mut() {
                        *o += s;
                    }
                }
            }
            Op::Add(terms) => {
                for t in terms {
                    if let Some(gt) = self.slot(slots, *t) {
                        gt.add_assign(g);
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(ga) = self.slot(slots, *a) {
                    for (o, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += gi * factor;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(slots, *a) {
                    ga.add_assign(g);
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                if let Some(ga) = self.slot(slots, *a) {
                    for ((o, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data().to_vec();
                if let Some(ga) = self.slot(slots, *a) {
                    for ((o, gi), xi) in ga.data_mut().iter_mut().zip(g.data()).zip(&x) {
                        if *xi >= *lo && *xi <= *hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Minimum(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let take_a: Vec<bool> = av.iter().zip(&bv).map(|(x, y)| x <= y).collect();
                if let Some(ga) = self.slot(slots, *a) {
                    for ((o, gi), &t) in ga.data_mut().iter_mut().zip(g.data()).zip(&take_a) {
                        if t {
                            *o += gi;
                        }
                    }
                }
                if let Some(gb) = self.slot(slots, *b) {
                    for ((o, gi), &t) in gb.data_mut().iter_mut().zip(g.data()).zip(&take_a) {
                        if !t {
                            *o += gi;
                        }
                    }
                }
            }
        }
    }
}

/// Compares the autodiff gradient of a scalar function against central
/// differences with step `h`. `f` receives a fresh graph and the id of the
/// leaf holding `x`, and must return a scalar node.
///
/// Returns `max_i |g_ad - g_fd| / max(1, |g_fd|)`.
pub fn finite_diff_check<F>(f: F, x: &Array, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::InvalidStep(h));
    }
    let mut graph = Graph::new();
    let leaf = graph.leaf(x.clone(), true)?;
    let out = f(&mut graph, leaf)?;
    let grads = graph.backward(out)?;
    let analytic = grads.get(leaf).expect("leaf requires grad").clone();

    let eval = |values: Array| -> Result<f64> {
        let mut g = Graph::new();
        let l = g.leaf(values, false)?;
        let o = f(&mut g, l)?;
        Ok(g.value(o).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
