//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the indices of its inputs. [`Graph::backward`] walks the tape in
//! reverse from a scalar output. Nodes that do not depend on a trainable
//! leaf are never visited on the way back.

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    ClampMin(Var, f64),
    RowSum(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn row_lse(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Copies the value of `v` into a fresh constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "add_row bias shape");
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..rows {
            for (v, bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    /// Scales row `i` of `a` by `col[i]`, where `col` is `n x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (rows, _) = self.shape(a);
        assert_eq!(self.shape(col), (rows, 1), "mul_col column shape");
        let mut value = self.value(a).clone();
        for r in 0..rows {
            let k = self.value(col).get(r, 0);
            for v in value.row_mut(r) {
                *v *= k;
            }
        }
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `max(a, lo)` elementwise; the gradient passes where `a >= lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    /// Sum over columns: `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let value = Matrix::from_vec(m.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::RowSum(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Row-wise log-sum-exp: `n x m -> n x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows()).map(|r| row_lse(m.row(r))).collect();
        let value = Matrix::from_vec(m.rows(), 1, data);
        let rg = self.rg(a);
        self.push(value, Op::LogSumExpRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let lse = row_lse(value.row(r));
            for v in value.row_mut(r) {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ls = self.log_softmax_rows(a);
        self.exp(ls)
    }

    /// Gradients of the scalar `output` with respect to all upstream nodes.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gg, bb| gg * bb));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gg, aa| gg * aa));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |gg, bb| gg / bb));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let t = y.zip_map(bv, |yy, bb| -yy / bb);
                    self.accumulate(grads, *b, g.zip_map(&t, |gg, tt| gg * tt));
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*bias) {
                    let mut col = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (c, v) in col.iter_mut().zip(g.row(r)) {
                            *c += v;
                        }
                    }
                    self.accumulate(grads, *bias, Matrix::from_vec(1, g.cols(), col));
                }
            }
            Op::MulCol(a, col) => {
                let av = self.value(*a);
                let cv = self.value(*col);
                if self.rg(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let k = cv.get(r, 0);
                        for v in d.row_mut(r) {
                            *v *= k;
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*col) {
                    let data = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, Matrix::from_vec(g.rows(), 1, data));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|v| k * v)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |gg, yy| gg * (1.0 - yy * yy))),
            Op::Softplus(a) => {
                let d = g.zip_map(self.value(*a), |gg, x| gg * sigmoid(x));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gg, yy| gg * yy)),
            Op::Log(a) => {
                let d = g.zip_map(self.value(*a), |gg, x| gg / x);
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |gg, x| 2.0 * gg * x);
                self.accumulate(grads, *a, d);
            }
            Op::ClampMin(a, lo) => {
                let lo = *lo;
                let d = g.zip_map(self.value(*a), |gg, x| if x >= lo { gg } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::RowSum(a) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let gr = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|v| *v = gr);
                }
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(rows, cols, g.item()));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.rg(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, w));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let mut d = av.clone();
                for r in 0..d.rows() {
                    let lse = y.get(r, 0);
                    let gr = g.get(r, 0);
                    for v in d.row_mut(r) {
                        *v = gr * (*v - lse).exp();
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    let yr = y.row(r);
                    for (v, yy) in d.row_mut(r).iter_mut().zip(yr) {
                        *v -= yy.exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, d);
            }
        }
    }
}
