//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every op appends one node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a reverse topological
//! order because a node can only reference nodes created before it.
//!
//! Shape errors inside an op are programming errors and panic with a message
//! naming the op; model code validates user-facing arities before it reaches
//! the tape.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Affine(Var, f64),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Relu(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<usize>),
    LayerNormRows(Var, f64),
    Dropout(Var, Vec<f64>),
    LstmCell(Var, Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    consumed: Cell<bool>,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: Vec<Option<Matrix>>,
    params: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// One gradient per stored parameter, zeros where the loss did not reach it.
    pub fn dense(&self, store: &ParamStore) -> Vec<Matrix> {
        store
            .iter()
            .map(|(id, _, v)| {
                self.params
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols()))
            })
            .collect()
    }
}

fn broadcast_kind(op: &str, a: (usize, usize), b: (usize, usize)) -> Broadcast {
    if a == b {
        Broadcast::Same
    } else if b == (1, 1) {
        Broadcast::Scalar
    } else if b.0 == 1 && b.1 == a.1 {
        Broadcast::Row
    } else if b.1 == 1 && b.0 == a.0 {
        Broadcast::Col
    } else {
        panic!("{op}: cannot broadcast {b:?} onto {a:?}")
    }
}

#[inline]
fn rhs_index(kind: Broadcast, cols: usize, r: usize, c: usize) -> usize {
    match kind {
        Broadcast::Same => r * cols + c,
        Broadcast::Row => c,
        Broadcast::Col => r,
        Broadcast::Scalar => 0,
    }
}

fn binary(a: &Matrix, b: &Matrix, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let (rows, cols) = a.shape();
    let bs = b.as_slice();
    Matrix::from_fn(rows, cols, |r, c| {
        f(a.get(r, c), bs[rhs_index(kind, cols, r, c)])
    })
}

/// Folds a full-shape gradient back onto the broadcast operand's shape.
fn reduce_to(kind: Broadcast, g: &Matrix, shape: (usize, usize)) -> Matrix {
    match kind {
        Broadcast::Same => g.clone(),
        _ => {
            let mut out = Matrix::zeros(shape.0, shape.1);
            let cols = g.cols();
            let o = out.as_mut_slice();
            for r in 0..g.rows() {
                for c in 0..cols {
                    o[rhs_index(kind, cols, r, c)] += g.get(r, c);
                }
            }
            out
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise standardisation; returns normalised values and per-row `1/σ`.
fn layer_norm_forward(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&self, m: Matrix) -> Var {
        self.push(m, Op::Leaf(None), false)
    }

    /// Differentiable free variable (used by tests and gradient checks).
    pub fn var(&self, m: Matrix) -> Var {
        self.push(m, Op::Leaf(None), true)
    }

    /// Binds a stored parameter to this tape. Repeated calls return the same node,
    /// so every use of a parameter accumulates into one gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf(Some(id)), true);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(
                x.cols(),
                y.rows(),
                "matmul: {:?} x {:?}",
                x.shape(),
                y.shape()
            );
            x.matmul(y)
        };
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    fn binary_op(
        &self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Var {
        let (value, kind) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let kind = broadcast_kind(name, x.shape(), y.shape());
            (binary(x, y, kind, f), kind)
        };
        let rg = self.rg(&[a, b]);
        self.push(value, make(a, b, kind), rg)
    }

    /// `a + b`; `b` may be a row vector, column vector or scalar broadcast onto `a`.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_op("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_op("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_op("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary_op("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `scale · a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `x · W + b` with `b` a row vector.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let mut off = 0;
                for p in parts {
                    let m = &nodes[p.0].value;
                    assert_eq!(m.rows(), rows, "concat_cols: row count mismatch");
                    out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                    off += m.cols();
                }
            }
            out
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert_eq!(m.cols(), cols, "concat_rows: column count mismatch");
                data.extend_from_slice(m.as_slice());
                rows += m.rows();
            }
            Matrix::from_vec(rows, cols, data).expect("concat_rows")
        };
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = {
            let m = self.value(a);
            assert!(start <= end && end <= m.cols(), "slice_cols: {start}..{end} of {}", m.cols());
            m.slice_cols(start, end)
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let value = {
            let m = self.value(a);
            assert!(start <= end && end <= m.rows(), "slice_rows: {start}..{end} of {}", m.rows());
            m.slice_rows(start, end)
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select_rows(idx);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    /// Output has `n` rows; row `idx[i]` accumulates row `i` of `a`. Rows never
    /// targeted stay zero.
    pub fn scatter_add_rows(&self, a: Var, idx: &[usize], n: usize) -> Var {
        let value = {
            let m = self.value(a);
            assert_eq!(m.rows(), idx.len(), "scatter_add_rows: index length");
            let mut out = Matrix::zeros(n, m.cols());
            for (i, &t) in idx.iter().enumerate() {
                for (o, v) in out.row_mut(t).iter_mut().zip(m.row(i)) {
                    *o += v;
                }
            }
            out
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::ScatterAddRows(a, idx.to_vec()), rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean: empty input");
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over rows: `r × c → 1 × c`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let value = {
            let m = self.value(a);
            let mut out = Matrix::zeros(1, m.cols());
            for r in 0..m.rows() {
                out.add_assign(&Matrix::row_vector(m.row(r)));
            }
            out
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Mean over rows: `r × c → 1 × c`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let rows = self.value(a).rows();
        assert!(rows > 0, "mean_rows: empty axis");
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / rows as f64)
    }

    /// Sum over columns: `r × c → r × 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = {
            let m = self.value(a);
            Matrix::from_fn(m.rows(), 1, |r, _| m.row(r).iter().sum())
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(a, elu, Op::Elu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let m = self.value(a);
            assert!(m.cols() > 0, "softmax: empty axis");
            let mut out = m.clone();
            for r in 0..out.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Softmax of an `E × 1` column within groups sharing `segment[e]`.
    pub fn segment_softmax(&self, a: Var, segment: &[usize]) -> Var {
        let value = {
            let m = self.value(a);
            assert_eq!(m.cols(), 1, "segment_softmax: expects a column");
            assert_eq!(m.rows(), segment.len(), "segment_softmax: segment length");
            let mut max: HashMap<usize, f64> = HashMap::new();
            for (e, &s) in segment.iter().enumerate() {
                let v = m.get(e, 0);
                max.entry(s)
                    .and_modify(|x| *x = x.max(v))
                    .or_insert(v);
            }
            let mut out = Matrix::zeros(m.rows(), 1);
            let mut sums: HashMap<usize, f64> = HashMap::new();
            for (e, &s) in segment.iter().enumerate() {
                let x = (m.get(e, 0) - max[&s]).exp();
                out.set(e, 0, x);
                *sums.entry(s).or_insert(0.0) += x;
            }
            for (e, &s) in segment.iter().enumerate() {
                out.set(e, 0, out.get(e, 0) / sums[&s]);
            }
            out
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::SegmentSoftmax(a, segment.to_vec()), rg)
    }

    /// Row-wise standardisation without affine terms.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        let value = {
            let m = self.value(a);
            assert!(m.cols() > 0, "layer_norm: empty axis");
            layer_norm_forward(&m, eps).0
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::LayerNormRows(a, eps), rg)
    }

    /// Inverted dropout. Identity (no node) when `train` is false or `p` is zero.
    pub fn dropout(&self, a: Var, p: f64, train: bool, rng: &mut impl Rng) -> Var {
        if !train || p <= 0.0 {
            return a;
        }
        assert!(p < 1.0, "dropout: p must be < 1");
        let n = self.value(a).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = {
            let m = self.value(a);
            let data = m.as_slice().iter().zip(&mask).map(|(x, k)| x * k).collect();
            Matrix::from_vec(m.rows(), m.cols(), data).expect("dropout")
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Dropout(a, mask), rg)
    }

    /// Fused LSTM cell. `pre` holds the `B × 4H` gate pre-activations in
    /// `[input, forget, cell, output]` order; returns `B × 2H` as `[h | c]`.
    pub fn lstm_cell(&self, pre: Var, c_prev: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (p, c) = (&nodes[pre.0].value, &nodes[c_prev.0].value);
            let h = c.cols();
            assert_eq!(p.cols(), 4 * h, "lstm_cell: gate width");
            assert_eq!(p.rows(), c.rows(), "lstm_cell: batch size");
            let mut out = Matrix::zeros(p.rows(), 2 * h);
            for r in 0..p.rows() {
                let pr = p.row(r);
                for j in 0..h {
                    let i = sigmoid(pr[j]);
                    let f = sigmoid(pr[h + j]);
                    let g = pr[2 * h + j].tanh();
                    let o = sigmoid(pr[3 * h + j]);
                    let cn = f * c.get(r, j) + i * g;
                    out.set(r, j, o * cn.tanh());
                    out.set(r, h + j, cn);
                }
            }
            out
        };
        let rg = self.rg(&[pre, c_prev]);
        self.push(value, Op::LstmCell(pre, c_prev), rg)
    }

    /// Reverse pass from a `1 × 1` loss. A tape can be differentiated once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::Autodiff("tape has already been consumed by backward".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        let accumulate = |grads: &mut Vec<Option<Matrix>>, v: Var, g: Matrix| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let out = &node.value;
            let val = |v: &Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf(_) => {}
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g.matmul_nt(val(b)));
                    }
                    if nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, val(a).matmul_tn(&g));
                    }
                }
                Op::Add(a, b, k) => {
                    accumulate(&mut grads, *b, reduce_to(*k, &g, val(b).shape()));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b, k) => {
                    accumulate(
                        &mut grads,
                        *b,
                        reduce_to(*k, &g.map(|x| -x), val(b).shape()),
                    );
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b, k) => {
                    let (x, y) = (val(a), val(b));
                    if nodes[b.0].requires_grad {
                        let gb = g.zip_map(x, |gi, xi| gi * xi);
                        accumulate(&mut grads, *b, reduce_to(*k, &gb, y.shape()));
                    }
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, binary(&g, y, *k, |gi, yi| gi * yi));
                    }
                }
                Op::Div(a, b, k) => {
                    let y = val(b);
                    if nodes[b.0].requires_grad {
                        // d(x/y)/dy = -out / y
                        let gy = binary(&g.zip_map(out, |gi, oi| -gi * oi), y, *k, |t, yi| t / yi);
                        accumulate(&mut grads, *b, reduce_to(*k, &gy, y.shape()));
                    }
                    if nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, binary(&g, y, *k, |gi, yi| gi / yi));
                    }
                }
                Op::Affine(a, s) => accumulate(&mut grads, *a, g.map(|x| x * s)),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(p).cols();
                        accumulate(&mut grads, *p, g.slice_cols(off, off + w));
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = val(p).rows();
                        accumulate(&mut grads, *p, g.slice_rows(off, off + h));
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = val(a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let src = val(a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx_list) => {
                    let src = val(a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (i, &t) in idx_list.iter().enumerate() {
                        for (o, v) in ga.row_mut(t).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterAddRows(a, idx_list) => {
                    accumulate(&mut grads, *a, g.select_rows(idx_list));
                }
                Op::SumAll(a) => {
                    let (r, c) = val(a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(a).shape();
                    accumulate(&mut grads, *a, Matrix::from_fn(r, c, |_, j| g.get(0, j)));
                }
                Op::SumCols(a) => {
                    let (r, c) = val(a).shape();
                    accumulate(&mut grads, *a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let ga = g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { gi * x.exp() });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(out, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(out, |gi, y| gi * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let ga = g.zip_map(val(a), |gi, x| if x > 0.0 { gi } else { gi * s });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(val(a), |gi, x| gi * x.signum() * f64::from(x != 0.0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(val(a), |gi, x| 2.0 * gi * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Matrix::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let (s, gr) = (out.row(r), g.row(r));
                        let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = s[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentSoftmax(a, segment) => {
                    let mut dots: HashMap<usize, f64> = HashMap::new();
                    for (e, &s) in segment.iter().enumerate() {
                        *dots.entry(s).or_insert(0.0) += out.get(e, 0) * g.get(e, 0);
                    }
                    let ga = Matrix::from_fn(out.rows(), 1, |e, _| {
                        out.get(e, 0) * (g.get(e, 0) - dots[&segment[e]])
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let (xhat, inv_std) = layer_norm_forward(val(a), *eps);
                    let cols = xhat.cols() as f64;
                    let mut ga = Matrix::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let (xh, gr) = (xhat.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / cols;
                        let mean_gx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (gr[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Dropout(a, mask) => {
                    let data = g.as_slice().iter().zip(mask).map(|(x, k)| x * k).collect();
                    let ga = Matrix::from_vec(g.rows(), g.cols(), data).expect("dropout grad");
                    accumulate(&mut grads, *a, ga);
                }
                Op::LstmCell(pre, c_prev) => {
                    let (p, c) = (val(pre), val(c_prev));
                    let h = c.cols();
                    let mut gp = Matrix::zeros(p.rows(), 4 * h);
                    let mut gc = Matrix::zeros(c.rows(), h);
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        for j in 0..h {
                            let i = sigmoid(pr[j]);
                            let f = sigmoid(pr[h + j]);
                            let gg = pr[2 * h + j].tanh();
                            let o = sigmoid(pr[3 * h + j]);
                            let cn = out.get(r, h + j);
                            let tc = cn.tanh();
                            let dh = g.get(r, j);
                            let dc = g.get(r, h + j) + dh * o * (1.0 - tc * tc);
                            gp.set(r, j, dc * gg * i * (1.0 - i));
                            gp.set(r, h + j, dc * c.get(r, j) * f * (1.0 - f));
                            gp.set(r, 2 * h + j, dc * i * (1.0 - gg * gg));
                            gp.set(r, 3 * h + j, dh * tc * o * (1.0 - o));
                            gc.set(r, j, dc * f);
                        }
                    }
                    accumulate(&mut grads, *pre, gp);
                    accumulate(&mut grads, *c_prev, gc);
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, &grads[i]) {
                params
                    .entry(*id)
                    .and_modify(|acc: &mut Matrix| acc.add_assign(g))
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }
}
