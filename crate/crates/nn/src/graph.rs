//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its value; [`Graph::backward`] walks the
//! tape in reverse. 3x3 rotation ops use a column-major 9-vector per row.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Tanh,
    Sigmoid,
    Silu,
    Softplus,
    Square,
    Sqrt,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
        }
    }
}

/// Nearest-target lookup table: one target cloud per input row.
pub type TargetClouds = Arc<Vec<Vec<[f64; 3]>>>;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Arc<Vec<Option<usize>>>),
    Transpose(Var),
    Reshape(Var),
    LayerNorm { x: Var, xhat: Tensor, inv_std: Vec<f64> },
    Softmax(Var),
    NormalizeRows(Var),
    Cross(Var, Var),
    Mat3Mul(Var, Var),
    Mat3Vec(Var, Var),
    NearestDist { points: Var, targets: TargetClouds, argmin: Vec<usize> },
    Scan { x: Var, a: Var, b: Var, c: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.of(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.params().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt()
    }
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

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, !store.is_frozen());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let g = self.needs(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.needs(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.needs(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols()), rv.shape(), "add_row shape mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *x += y;
            }
        }
        let g = self.needs(&[a, row]);
        self.push(v, Op::AddRow(a, row), g)
    }

    /// `a (m x n) * row (1 x n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((1, av.cols()), rv.shape(), "mul_row shape mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= y;
            }
        }
        let g = self.needs(&[a, row]);
        self.push(v, Op::MulRow(a, row), g)
    }

    /// `a (m x n) * col (m x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!((av.rows(), 1), cv.shape(), "mul_col shape mismatch");
        let mut v = av.clone();
        for r in 0..v.rows() {
            let s = cv.data()[r];
            v.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let g = self.needs(&[a, col]);
        self.push(v, Op::MulCol(a, col), g)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let g = self.needs(&[a]);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let g = self.needs(&[a]);
        self.push(v, Op::Offset(a), g)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        let g = self.needs(&[a]);
        self.push(v, Op::Unary(a, f), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let g = self.needs(&[a]);
        self.push(v, Op::SumAll(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let v = Tensor::new(av.rows(), 1, (0..av.rows()).map(|r| av.row(r).iter().sum()).collect());
        let g = self.needs(&[a]);
        self.push(v, Op::SumCols(a), g)
    }

    /// Column sums, `1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut v = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (x, y) in v.data_mut().iter_mut().zip(av.row(r)) {
                *x += y;
            }
        }
        let g = self.needs(&[a]);
        self.push(v, Op::SumRows(a), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.value(a).cols(), "slice_cols out of range");
        let v = self.value(a).slice_cols(start, len);
        let g = self.needs(&[a]);
        self.push(v, Op::SliceCols(a, start), g)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.value(a).rows(), "slice_rows out of range");
        let v = self.value(a).slice_rows(start, len);
        let g = self.needs(&[a]);
        self.push(v, Op::SliceRows(a, start), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let v = Tensor::concat_cols(&parts.iter().map(|p| self.value(*p)).collect::<Vec<_>>());
        let g = self.needs(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let v = Tensor::concat_rows(&parts.iter().map(|p| self.value(*p)).collect::<Vec<_>>());
        let g = self.needs(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Output row `r` is input row `index[r]`, or zeros for `None`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<Option<usize>>>) -> Var {
        let av = self.value(a);
        let mut v = Tensor::zeros(index.len(), av.cols());
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = src {
                v.row_mut(r).copy_from_slice(av.row(*s));
            }
        }
        let g = self.needs(&[a]);
        self.push(v, Op::Gather(a, index), g)
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        self.gather_rows(a, Arc::new((0..n).rev().map(Some).collect()))
    }

    /// Row `r` becomes input row `r - shift` (zero where out of range).
    pub fn shift_rows(&mut self, a: Var, shift: isize) -> Var {
        let n = self.value(a).rows() as isize;
        let idx = (0..n)
            .map(|r| {
                let s = r - shift;
                (0..n).contains(&s).then_some(s as usize)
            })
            .collect();
        self.gather_rows(a, Arc::new(idx))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let g = self.needs(&[a]);
        self.push(v, Op::Transpose(a), g)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshape(rows, cols);
        let g = self.needs(&[a]);
        self.push(v, Op::Reshape(a), g)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let n = av.cols() as f64;
        let mut xhat = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        let g = self.needs(&[a]);
        let v = xhat.clone();
        self.push(v, Op::LayerNorm { x: a, xhat, inv_std }, g)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let g = self.needs(&[a]);
        self.push(v, Op::Softmax(a), g)
    }

    /// Each row scaled to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let g = self.needs(&[a]);
        self.push(v, Op::NormalizeRows(a), g)
    }

    /// Row-wise cross product of two `B x 3` tensors.
    pub fn cross_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), 3);
        assert_eq!(av.shape(), bv.shape());
        let mut v = Tensor::zeros(av.rows(), 3);
        for r in 0..av.rows() {
            v.row_mut(r).copy_from_slice(&cross(av.row(r), bv.row(r)));
        }
        let g = self.needs(&[a, b]);
        self.push(v, Op::Cross(a, b), g)
    }

    /// Row-wise 3x3 products of column-major `B x 9` tensors.
    pub fn mat3_mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), 9);
        assert_eq!(av.shape(), bv.shape());
        let mut v = Tensor::zeros(av.rows(), 9);
        for r in 0..av.rows() {
            v.row_mut(r).copy_from_slice(&m3_mul(av.row(r), bv.row(r)));
        }
        let g = self.needs(&[a, b]);
        self.push(v, Op::Mat3Mul(a, b), g)
    }

    /// Row-wise `M v` for `B x 9` matrices and `B x 3` vectors.
    pub fn mat3_vec(&mut self, m: Var, x: Var) -> Var {
        let (mv, xv) = (self.value(m), self.value(x));
        assert_eq!(mv.cols(), 9);
        assert_eq!(xv.shape(), (mv.rows(), 3));
        let mut v = Tensor::zeros(mv.rows(), 3);
        for r in 0..mv.rows() {
            v.row_mut(r).copy_from_slice(&m3_vec(mv.row(r), xv.row(r)));
        }
        let g = self.needs(&[m, x]);
        self.push(v, Op::Mat3Vec(m, x), g)
    }

    /// `points` is `B x 3V`; output `B x V` holds each point's distance to the
    /// nearest entry of `targets[b]`.
    pub fn nearest_distance(&mut self, points: Var, targets: TargetClouds) -> Var {
        let pv = self.value(points);
        assert_eq!(pv.cols() % 3, 0);
        assert_eq!(pv.rows(), targets.len());
        let nv = pv.cols() / 3;
        let mut v = Tensor::zeros(pv.rows(), nv);
        let mut argmin = Vec::with_capacity(pv.rows() * nv);
        for b in 0..pv.rows() {
            let row = pv.row(b);
            for k in 0..nv {
                let p = &row[3 * k..3 * k + 3];
                let (best, d2) = targets[b]
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (i, (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)))
                    .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                v.set(b, k, d2.sqrt());
                argmin.push(best);
            }
        }
        let g = self.needs(&[points]);
        self.push(v, Op::NearestDist { points, targets, argmin }, g)
    }

    /// Diagonal selective scan. `x`, `a`: `L x D`; `b`, `c`: `L x S`.
    /// `h_t[d,s] = a_t[d] h_{t-1}[d,s] + b_t[s] x_t[d]`, `y_t[d] = sum_s c_t[s] h_t[d,s]`.
    pub fn selective_scan(&mut self, x: Var, a: Var, b: Var, c: Var) -> Var {
        let v = scan_forward(self.value(x), self.value(a), self.value(b), self.value(c), None);
        let g = self.needs(&[x, a, b, c]);
        self.push(v, Op::Scan { x, a, b, c }, g)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    self.acc(grads, *a, gemm(g, false, val(*b), true));
                }
                if want(*b) {
                    self.acc(grads, *b, gemm(val(*a), true, g, false));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    self.acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if want(*b) {
                    self.acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if want(*row) {
                    self.acc(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if want(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, y) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                            *x *= y;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if want(*row) {
                    self.acc(grads, *row, column_sums(&g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Op::MulCol(a, col) => {
                let cv = val(*col);
                if want(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = cv.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    self.acc(grads, *a, ga);
                }
                if want(*col) {
                    let av = val(*a);
                    let gc = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.acc(grads, *col, Tensor::new(g.rows(), 1, gc));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::Unary(a, f) => {
                let x = val(*a);
                let y = &node.value;
                let d = Tensor::new(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(y.data())
                        .zip(g.data())
                        .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                        .collect(),
                );
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                self.acc(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                self.acc(grads, *a, Tensor::from_fn(r, c, |i, _| g.data()[i]));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                self.acc(grads, *a, Tensor::from_fn(r, c, |_, j| g.data()[j]));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                if want(*a) {
                    let (r, c) = val(*a).shape();
                    let slot = grads[a.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    for (x, y) in slot.data_mut()[start * c..(start + g.rows()) * c].iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if want(*p) {
                        self.acc(grads, *p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = val(*p).rows();
                    if want(*p) {
                        self.acc(grads, *p, g.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::Gather(a, index) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (out_r, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        for (x, y) in ga.row_mut(*s).iter_mut().zip(g.row(out_r)) {
                            *x += y;
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                self.acc(grads, *a, g.clone().reshape(r, c));
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = xhat.cols() as f64;
                let mut gx = Tensor::zeros(xhat.rows(), xhat.cols());
                for r in 0..xhat.rows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let sg: f64 = gr.iter().sum();
                    let sgx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let inv = inv_std[r];
                    for (k, out) in gx.row_mut(r).iter_mut().enumerate() {
                        *out = inv / n * (n * gr[k] - sg - xr[k] * sgx);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for (k, out) in ga.row_mut(r).iter_mut().enumerate() {
                        *out = y.get(r, k) * (g.get(r, k) - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for (k, out) in ga.row_mut(r).iter_mut().enumerate() {
                        *out = (g.get(r, k) - y.get(r, k) * dot) / n;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Cross(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(av.rows(), 3);
                let mut gb = Tensor::zeros(av.rows(), 3);
                for r in 0..av.rows() {
                    ga.row_mut(r).copy_from_slice(&cross(bv.row(r), g.row(r)));
                    gb.row_mut(r).copy_from_slice(&cross(g.row(r), av.row(r)));
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Mat3Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(av.rows(), 9);
                let mut gb = Tensor::zeros(av.rows(), 9);
                for r in 0..av.rows() {
                    ga.row_mut(r).copy_from_slice(&m3_mul(g.row(r), &m3_t(bv.row(r))));
                    gb.row_mut(r).copy_from_slice(&m3_mul(&m3_t(av.row(r)), g.row(r)));
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Mat3Vec(m, x) => {
                let (mv, xv) = (val(*m), val(*x));
                let mut gm = Tensor::zeros(mv.rows(), 9);
                let mut gx = Tensor::zeros(mv.rows(), 3);
                for r in 0..mv.rows() {
                    let (gr, xr) = (g.row(r), xv.row(r));
                    let out = gm.row_mut(r);
                    for col in 0..3 {
                        for row in 0..3 {
                            out[col * 3 + row] = gr[row] * xr[col];
                        }
                    }
                    gx.row_mut(r).copy_from_slice(&m3_vec(&m3_t(mv.row(r)), gr));
                }
                self.acc(grads, *m, gm);
                self.acc(grads, *x, gx);
            }
            Op::NearestDist { points, targets, argmin } => {
                let pv = val(*points);
                let d = &node.value;
                let nv = d.cols();
                let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                for b in 0..pv.rows() {
                    for k in 0..nv {
                        let dist = d.get(b, k);
                        if dist <= 0.0 {
                            continue;
                        }
                        let t = targets[b][argmin[b * nv + k]];
                        let s = g.get(b, k) / dist;
                        let row = gp.row_mut(b);
                        for e in 0..3 {
                            row[3 * k + e] = s * (pv.get(b, 3 * k + e) - t[e]);
                        }
                    }
                }
                self.acc(grads, *points, gp);
            }
            Op::Scan { x, a, b, c } => {
                let [gx, ga, gb, gc] = scan_backward(val(*x), val(*a), val(*b), val(*c), g);
                self.acc(grads, *x, gx);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
                self.acc(grads, *c, gc);
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (x, y) in out.data_mut().iter_mut().zip(g.row(r)) {
            *x += y;
        }
    }
    out
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Column-major 3x3 product.
fn m3_mul(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for col in 0..3 {
        for row in 0..3 {
            out[col * 3 + row] = (0..3).map(|k| a[k * 3 + row] * b[col * 3 + k]).sum();
        }
    }
    out
}

fn m3_t(a: &[f64]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for col in 0..3 {
        for row in 0..3 {
            out[col * 3 + row] = a[row * 3 + col];
        }
    }
    out
}

fn m3_vec(m: &[f64], x: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (row, o) in out.iter_mut().enumerate() {
        *o = (0..3).map(|k| m[k * 3 + row] * x[k]).sum();
    }
    out
}

/// Forward scan. When `states` is given, the hidden state after every step
/// is appended to it (`L x D x S`, row-major).
pub fn scan_forward(x: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, mut states: Option<&mut Vec<f64>>) -> Tensor {
    let (l, d) = x.shape();
    let s = b.cols();
    assert_eq!(a.shape(), (l, d), "scan decay shape");
    assert_eq!(b.shape(), (l, s), "scan input-matrix shape");
    assert_eq!(c.shape(), (l, s), "scan output-matrix shape");
    let mut h = vec![0.0; d * s];
    let mut y = Tensor::zeros(l, d);
    for t in 0..l {
        let (xt, at, bt, ct) = (x.row(t), a.row(t), b.row(t), c.row(t));
        let yt = y.row_mut(t);
        for ch in 0..d {
            let hs = &mut h[ch * s..(ch + 1) * s];
            let (decay, input) = (at[ch], xt[ch]);
            let mut acc = 0.0;
            for k in 0..s {
                hs[k] = decay * hs[k] + bt[k] * input;
                acc += ct[k] * hs[k];
            }
            yt[ch] = acc;
        }
        if let Some(st) = states.as_deref_mut() {
            st.extend_from_slice(&h);
        }
    }
    y
}

fn scan_backward(x: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, gy: &Tensor) -> [Tensor; 4] {
    let (l, d) = x.shape();
    let s = b.cols();
    let mut states = Vec::with_capacity(l * d * s);
    scan_forward(x, a, b, c, Some(&mut states));
    let mut gx = Tensor::zeros(l, d);
    let mut ga = Tensor::zeros(l, d);
    let mut gb = Tensor::zeros(l, s);
    let mut gc = Tensor::zeros(l, s);
    let mut dh = vec![0.0; d * s];
    let zeros = vec![0.0; d * s];
    for t in (0..l).rev() {
        let h_t = &states[t * d * s..(t + 1) * d * s];
        let h_prev = if t > 0 { &states[(t - 1) * d * s..t * d * s] } else { &zeros[..] };
        let (xt, at, bt, ct, gyt) = (x.row(t), a.row(t), b.row(t), c.row(t), gy.row(t));
        let mut gct = vec![0.0; s];
        let mut gbt = vec![0.0; s];
        for ch in 0..d {
            let dhs = &mut dh[ch * s..(ch + 1) * s];
            let hs = &h_t[ch * s..(ch + 1) * s];
            let hp = &h_prev[ch * s..(ch + 1) * s];
            let g = gyt[ch];
            let mut ga_acc = 0.0;
            let mut gx_acc = 0.0;
            for k in 0..s {
                gct[k] += g * hs[k];
                dhs[k] += g * ct[k];
                ga_acc += dhs[k] * hp[k];
                gbt[k] += dhs[k] * xt[ch];
                gx_acc += dhs[k] * bt[k];
                dhs[k] *= at[ch];
            }
            ga.set(t, ch, ga_acc);
            gx.set(t, ch, gx_acc);
        }
        gc.row_mut(t).copy_from_slice(&gct);
        gb.row_mut(t).copy_from_slice(&gbt);
    }
    [gx, ga, gb, gc]
}
