//! Reverse-accumulation gradient tape.
//!
//! Every node holds a dense row-major `f64` block of shape `(rows, cols)`;
//! column vectors are `(n, 1)` and scalars are `(1, 1)`. Nodes are appended
//! in evaluation order, so the reverse pass is a single backwards sweep.
//!
//! Elementwise binary operations broadcast a dimension of size 1 against the
//! other operand, numpy style.

use std::sync::Arc;

use thiserror::Error;

use crate::linalg::{self, CsrMatrix};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GradError {
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn col(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Elu(usize),
    Sum(usize),
    RowSum(usize),
    LogSumExp(usize),
    RowLogSumExp(usize),
    RowMax(usize),
    Dot(usize, usize),
    MatVec(usize, usize),
    MatMul(usize, usize),
    SparseMatVec(Arc<CsrMatrix>, usize),
    Gather(usize, Arc<[usize]>),
    Reshape(usize),
    StopGradient,
    LogDet(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Elu(_) => "elu",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::LogSumExp(_) => "logsumexp",
            Op::RowLogSumExp(_) => "row_logsumexp",
            Op::RowMax(_) => "row_max",
            Op::Dot(..) => "dot",
            Op::MatVec(..) => "matvec",
            Op::MatMul(..) => "matmul",
            Op::SparseMatVec(..) => "sparse_matvec",
            Op::Gather(..) => "gather",
            Op::Reshape(_) => "reshape",
            Op::StopGradient => "stop_gradient",
            Op::LogDet(_) => "logdet",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
}

fn broadcast_shape(a: Shape, b: Shape, op: &str) -> Shape {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("{op}: cannot broadcast {a:?} with {b:?}")
        }
    };
    Shape::new(dim(a.rows, b.rows), dim(a.cols, b.cols))
}

#[inline]
fn bidx(s: Shape, r: usize, c: usize) -> usize {
    let r = if s.rows == 1 { 0 } else { r };
    let c = if s.cols == 1 { 0 } else { c };
    r * s.cols + c
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>) -> Var {
        debug_assert_eq!(shape.len(), value.len(), "{}", op.name());
        if self.non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { op, shape, value });
        Var(self.nodes.len() - 1)
    }

    /// First node kind whose forward value was NaN or infinite, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!(n.shape, Shape::SCALAR, "not a scalar");
        n.value[0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Differentiable leaf, as a column vector.
    pub fn input(&mut self, values: &[f64]) -> Var {
        self.push(Op::Input, Shape::col(values.len()), values.to_vec())
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Shape) -> Var {
        self.push(Op::Const, shape, values)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(vec![x], Shape::SCALAR)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb, op.name());
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut v = Vec::with_capacity(out.len());
            for r in 0..out.rows {
                for c in 0..out.cols {
                    v.push(f(va[bidx(sa, r, c)], vb[bidx(sb, r, c)]));
                }
            }
            v
        };
        self.push(op, out, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| c * x).collect();
        self.push(Op::Scale(a.0, c), self.shape(a), value)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(op, self.shape(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a.0), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a.0), Shape::SCALAR, vec![s])
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let v = self.value(a);
        let value = (0..s.rows)
            .map(|r| v[r * s.cols..(r + 1) * s.cols].iter().sum())
            .collect();
        self.push(Op::RowSum(a.0), Shape::col(s.rows), value)
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        let l = linalg::logsumexp(self.value(a));
        self.push(Op::LogSumExp(a.0), Shape::SCALAR, vec![l])
    }

    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let v = self.value(a);
        let value = (0..s.rows)
            .map(|r| linalg::logsumexp(&v[r * s.cols..(r + 1) * s.cols]))
            .collect();
        self.push(Op::RowLogSumExp(a.0), Shape::col(s.rows), value)
    }

    pub fn row_max(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let v = self.value(a);
        let value = (0..s.rows)
            .map(|r| {
                let row = &v[r * s.cols..(r + 1) * s.cols];
                row[linalg::argmax(row)]
            })
            .collect();
        self.push(Op::RowMax(a.0), Shape::col(s.rows), value)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a).len(),
            self.shape(b).len(),
            "dot: length mismatch"
        );
        let d = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a.0, b.0), Shape::SCALAR, vec![d])
    }

    /// Dense matrix times column vector.
    pub fn matvec(&mut self, m: Var, v: Var) -> Var {
        let sm = self.shape(m);
        assert_eq!(sm.cols, self.shape(v).len(), "matvec: inner dimension");
        let (mv, vv) = (self.value(m), self.value(v));
        let value = (0..sm.rows)
            .map(|r| {
                mv[r * sm.cols..(r + 1) * sm.cols]
                    .iter()
                    .zip(vv)
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        self.push(Op::MatVec(m.0, v.0), Shape::col(sm.rows), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.cols, sb.rows, "matmul: inner dimension");
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = vec![0.0; sa.rows * sb.cols];
        for i in 0..sa.rows {
            for k in 0..sa.cols {
                let x = va[i * sa.cols + k];
                if x == 0.0 {
                    continue;
                }
                let out = &mut value[i * sb.cols..(i + 1) * sb.cols];
                for (o, y) in out.iter_mut().zip(&vb[k * sb.cols..(k + 1) * sb.cols]) {
                    *o += x * y;
                }
            }
        }
        self.push(Op::MatMul(a.0, b.0), Shape::new(sa.rows, sb.cols), value)
    }

    /// Constant sparse matrix times a variable column vector.
    pub fn sparse_matvec(&mut self, m: &Arc<CsrMatrix>, v: Var) -> Var {
        assert_eq!(m.cols(), self.shape(v).len(), "sparse_matvec: inner dimension");
        let value = m.mul_vec(self.value(v));
        self.push(Op::SparseMatVec(Arc::clone(m), v.0), Shape::col(m.rows()), value)
    }

    /// Picks entries of the (flattened) input by index, as a column vector.
    pub fn gather(&mut self, a: Var, idx: &Arc<[usize]>) -> Var {
        let v = self.value(a);
        let value = idx.iter().map(|&i| v[i]).collect();
        self.push(Op::Gather(a.0, Arc::clone(idx)), Shape::col(idx.len()), value)
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Var {
        assert_eq!(self.shape(a).len(), shape.len(), "reshape: size mismatch");
        let value = self.value(a).to_vec();
        self.push(Op::Reshape(a.0), shape, value)
    }

    /// Same forward value; no adjoint flows back through this node.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).to_vec();
        self.push(Op::StopGradient, self.shape(a), value)
    }

    /// `log det A` of a square matrix. A non-positive determinant yields NaN.
    pub fn logdet(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.rows, s.cols, "logdet: matrix must be square");
        let (l, sign) = linalg::log_abs_det(s.rows, self.value(a));
        let v = if sign > 0.0 { l } else { f64::NAN };
        self.push(Op::LogDet(a.0), Shape::SCALAR, vec![v])
    }

    /// Row-wise softmax, `exp(x - logsumexp_row(x))`.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let lse = self.row_logsumexp(a);
        let centred = self.sub(a, lse);
        self.exp(centred)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, GradError> {
        if let Some(op) = self.non_finite {
            return Err(GradError::NonFinite { op });
        }
        assert_eq!(self.shape(root), Shape::SCALAR, "backward needs a scalar root");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let shape = node.shape;
            self.propagate(node, shape, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, node: &Node, shape: Shape, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |j: usize| &self.nodes[j].value;
        let sh = |j: usize| self.nodes[j].shape;
        match &node.op {
            Op::Input | Op::Const | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                reduce_into(adj, *a, sh(*a), shape, g, |_, _, gi| gi);
                reduce_into(adj, *b, sh(*b), shape, g, |_, _, gi| sign * gi);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (sh(*a), sh(*b));
                let (va, vb) = (val(*a), val(*b));
                reduce_into(adj, *a, sa, shape, g, |r, c, gi| gi * vb[bidx(sb, r, c)]);
                reduce_into(adj, *b, sb, shape, g, |r, c, gi| gi * va[bidx(sa, r, c)]);
            }
            Op::Div(a, b) => {
                let (sa, sb) = (sh(*a), sh(*b));
                let (va, vb) = (val(*a), val(*b));
                reduce_into(adj, *a, sa, shape, g, |r, c, gi| gi / vb[bidx(sb, r, c)]);
                reduce_into(adj, *b, sb, shape, g, |r, c, gi| {
                    let y = vb[bidx(sb, r, c)];
                    -gi * va[bidx(sa, r, c)] / (y * y)
                });
            }
            Op::Scale(a, k) => {
                let acc = slot(adj, *a, shape.len());
                for (o, gi) in acc.iter_mut().zip(g) {
                    *o += k * gi;
                }
            }
            Op::Exp(a) => {
                let y = &node.value;
                let acc = slot(adj, *a, shape.len());
                for ((o, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *o += gi * yi;
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                let acc = slot(adj, *a, shape.len());
                for ((o, gi), xi) in acc.iter_mut().zip(g).zip(x) {
                    *o += gi / xi;
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let acc = slot(adj, *a, shape.len());
                for ((o, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *o += gi * (1.0 - yi * yi);
                }
            }
            Op::Elu(a) => {
                let x = val(*a);
                let acc = slot(adj, *a, shape.len());
                for ((o, gi), xi) in acc.iter_mut().zip(g).zip(x) {
                    *o += if *xi > 0.0 { *gi } else { gi * xi.exp() };
                }
            }
            Op::Sum(a) => {
                let n = sh(*a).len();
                let acc = slot(adj, *a, n);
                for o in acc.iter_mut() {
                    *o += g[0];
                }
            }
            Op::RowSum(a) => {
                let s = sh(*a);
                let acc = slot(adj, *a, s.len());
                for r in 0..s.rows {
                    for o in &mut acc[r * s.cols..(r + 1) * s.cols] {
                        *o += g[r];
                    }
                }
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let l = node.value[0];
                let acc = slot(adj, *a, x.len());
                for (o, xi) in acc.iter_mut().zip(x) {
                    *o += g[0] * (xi - l).exp();
                }
            }
            Op::RowLogSumExp(a) => {
                let s = sh(*a);
                let x = val(*a);
                let l = &node.value;
                let acc = slot(adj, *a, s.len());
                for r in 0..s.rows {
                    for c in 0..s.cols {
                        let k = r * s.cols + c;
                        acc[k] += g[r] * (x[k] - l[r]).exp();
                    }
                }
            }
            Op::RowMax(a) => {
                let s = sh(*a);
                let x = val(*a);
                let acc = slot(adj, *a, s.len());
                for r in 0..s.rows {
                    let row = &x[r * s.cols..(r + 1) * s.cols];
                    acc[r * s.cols + linalg::argmax(row)] += g[r];
                }
            }
            Op::Dot(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga: Vec<f64> = vb.iter().map(|y| g[0] * y).collect();
                let gb: Vec<f64> = va.iter().map(|x| g[0] * x).collect();
                add_into(slot(adj, *a, ga.len()), &ga);
                add_into(slot(adj, *b, gb.len()), &gb);
            }
            Op::MatVec(m, v) => {
                let sm = sh(*m);
                let (vm, vv) = (val(*m), val(*v));
                {
                    let acc = slot(adj, *m, sm.len());
                    for r in 0..sm.rows {
                        if g[r] == 0.0 {
                            continue;
                        }
                        for c in 0..sm.cols {
                            acc[r * sm.cols + c] += g[r] * vv[c];
                        }
                    }
                }
                let acc = slot(adj, *v, sm.cols);
                for r in 0..sm.rows {
                    if g[r] == 0.0 {
                        continue;
                    }
                    for c in 0..sm.cols {
                        acc[c] += g[r] * vm[r * sm.cols + c];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (sh(*a), sh(*b));
                let (va, vb) = (val(*a), val(*b));
                // dA = G B^T
                {
                    let acc = slot(adj, *a, sa.len());
                    for i in 0..sa.rows {
                        for k in 0..sa.cols {
                            let mut s = 0.0;
                            for j in 0..sb.cols {
                                s += g[i * sb.cols + j] * vb[k * sb.cols + j];
                            }
                            acc[i * sa.cols + k] += s;
                        }
                    }
                }
                // dB = A^T G
                let acc = slot(adj, *b, sb.len());
                for i in 0..sa.rows {
                    for k in 0..sa.cols {
                        let x = va[i * sa.cols + k];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..sb.cols {
                            acc[k * sb.cols + j] += x * g[i * sb.cols + j];
                        }
                    }
                }
            }
            Op::SparseMatVec(m, v) => {
                let acc = slot(adj, *v, m.cols());
                m.mul_transpose_acc(g, acc);
            }
            Op::Gather(a, idx) => {
                let n = sh(*a).len();
                let acc = slot(adj, *a, n);
                for (&i, gi) in idx.iter().zip(g) {
                    acc[i] += gi;
                }
            }
            Op::Reshape(a) => {
                add_into(slot(adj, *a, shape.len()), g);
            }
            Op::LogDet(a) => {
                // d log det A / dA = A^{-T}
                let s = sh(*a);
                let inv = linalg::inverse(s.rows, val(*a)).unwrap_or_else(|| vec![f64::NAN; s.len()]);
                let acc = slot(adj, *a, s.len());
                for i in 0..s.rows {
                    for j in 0..s.cols {
                        acc[i * s.cols + j] += g[0] * inv[j * s.rows + i];
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], i: usize, n: usize) -> &mut Vec<f64> {
    adj[i].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (o, gi) in acc.iter_mut().zip(g) {
        *o += gi;
    }
}

/// Accumulates a broadcast adjoint back onto an operand of shape `s`.
fn reduce_into(
    adj: &mut [Option<Vec<f64>>],
    i: usize,
    s: Shape,
    out: Shape,
    g: &[f64],
    f: impl Fn(usize, usize, f64) -> f64,
) {
    let acc = slot(adj, i, s.len());
    if s == out {
        for r in 0..out.rows {
            for c in 0..out.cols {
                let k = r * out.cols + c;
                acc[k] += f(r, c, g[k]);
            }
        }
    } else {
        for r in 0..out.rows {
            for c in 0..out.cols {
                acc[bidx(s, r, c)] += f(r, c, g[r * out.cols + c]);
            }
        }
    }
}

/// Adjoints from one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`; zeros if nothing flowed into it.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.adj
            .get(v.0)
            .and_then(|a| a.clone())
            .unwrap_or_else(|| vec![0.0; len])
    }
}

/// Value and gradient of a scalar expression of `theta`.
pub fn grad<F>(theta: &[f64], f: F) -> Result<(f64, Vec<f64>), GradError>
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let (v, g, ()) = grad_with(theta, |t, x| (f(t, x), ()))?;
    Ok((v, g))
}

/// Like [`grad`], also returning whatever side output `f` produces.
pub fn grad_with<F, T>(theta: &[f64], f: F) -> Result<(f64, Vec<f64>, T), GradError>
where
    F: FnOnce(&mut Tape, Var) -> (Var, T),
{
    let mut tape = Tape::new();
    let x = tape.input(theta);
    let (root, aux) = f(&mut tape, x);
    let grads = tape.backward(root)?;
    Ok((tape.scalar_value(root), grads.wrt(x, theta.len()), aux))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_diff(theta: &[f64], h: f64, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                let mut p = theta.to_vec();
                let mut m = theta.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn value_of(theta: &[f64], build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut t = Tape::new();
        let x = t.input(theta);
        let r = build(&mut t, x);
        t.scalar_value(r)
    }

    fn check(theta: &[f64], build: &dyn Fn(&mut Tape, Var) -> Var, tol: f64) {
        let (_, g) = grad(theta, |t, x| build(t, x)).unwrap();
        let fd = central_diff(theta, 1e-6, &|p| value_of(p, build));
        for (a, b) in g.iter().zip(&fd) {
            let err = (a - b).abs() / (1e-8 + a.abs().max(b.abs()));
            assert!(err < tol || (a - b).abs() < 1e-8, "grad {a} vs fd {b}");
        }
    }

    #[test]
    fn dot_with_itself() {
        let (v, g) = grad(&[1.0, 2.0], |t, x| t.dot(x, x)).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn logsumexp_symmetric() {
        let (v, g) = grad(&[0.0, 0.0], |t, x| t.logsumexp(x)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stop_gradient_detaches_one_factor() {
        let (v, g) = grad(&[3.0], |t, x| {
            let d = t.stop_gradient(x);
            let p = t.mul(d, x);
            t.sum(p)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g, vec![3.0]);
    }

    #[test]
    fn stop_gradient_of_constant_is_zero() {
        let (_, g) = grad(&[1.0, -2.0], |t, x| {
            let c = t.constant(vec![4.0, 5.0], Shape::col(2));
            let s = t.stop_gradient(c);
            let y = t.add(x, s);
            let z = t.stop_gradient(y);
            t.sum(z)
        })
        .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_reports_node_kind() {
        let err = grad(&[-1.0], |t, x| {
            let l = t.log(x);
            t.sum(l)
        })
        .unwrap_err();
        assert_eq!(err, GradError::NonFinite { op: "log" });
    }

    #[test]
    fn broadcasting_reduces_adjoints() {
        // row-vector bias added to a matrix
        check(
            &[0.3, -0.4, 1.2, 0.7, 0.1, -0.9, 0.5, 0.2],
            &|t, x| {
                let idx: Arc<[usize]> = (0..6).collect::<Vec<_>>().into();
                let m = t.gather(x, &idx);
                let m = t.reshape(m, Shape::new(3, 2));
                let bidx: Arc<[usize]> = vec![6, 7].into();
                let b = t.gather(x, &bidx);
                let b = t.reshape(b, Shape::new(1, 2));
                let y = t.add(m, b);
                let col = t.row_logsumexp(y);
                let z = t.sub(y, col);
                let z = t.mul(z, z);
                t.sum(z)
            },
            1e-6,
        );
    }

    #[test]
    fn logdet_gradient() {
        check(
            &[2.0, 0.3, -0.2, 0.1, 1.5, 0.4, 0.2, -0.3, 1.8],
            &|t, x| {
                let m = t.reshape(x, Shape::new(3, 3));
                t.logdet(m)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_and_sparse_gradients() {
        let sp = Arc::new(CsrMatrix::from_dense(2, 3, &[1.0, 0.0, -2.0, 0.0, 0.5, 3.0]));
        check(
            &[0.2, -0.5, 0.9, 1.1, -0.3, 0.4],
            &move |t, x| {
                let a = t.reshape(x, Shape::new(2, 3));
                let b = t.reshape(x, Shape::new(3, 2));
                let c = t.matmul(a, b);
                let t3: Arc<[usize]> = vec![0, 2, 4].into();
                let v = t.gather(x, &t3);
                let s = t.sparse_matvec(&sp, v);
                let w = t.matvec(a, v);
                let cs = t.sum(c);
                let ss = t.dot(s, w);
                t.add(cs, ss)
            },
            1e-6,
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn elementwise_primitives_match_central_differences(
            xs in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            // keep elu away from its kink
            prop_assume!(xs.iter().all(|x| x.abs() > 1e-3));
            fn pre(t: &mut Tape, x: Var) -> Var {
                let e = t.exp(x);
                let th = t.tanh(x);
                let el = t.elu(x);
                let s = t.scalar(3.0);
                let shifted = t.add(e, s);
                let lg = t.log(shifted);
                let q = t.div(th, shifted);
                let m = t.mul(el, lg);
                t.sub(m, q)
            }
            let build = |t: &mut Tape, x: Var| {
                let r = pre(t, x);
                let mx = t.reshape(r, Shape::new(2, 2));
                let rm = t.row_max(mx);
                let rs = t.row_sum(mx);
                let a = t.dot(rm, rs);
                let b = t.logsumexp(r);
                let b = t.scale(b, 0.7);
                t.add(a, b)
            };
            // row_max is only differentiable away from ties
            let r: Vec<f64> = {
                let mut t = Tape::new();
                let x = t.input(&xs);
                let r = pre(&mut t, x);
                t.value(r).to_vec()
            };
            prop_assume!((r[0] - r[1]).abs() > 1e-3 && (r[2] - r[3]).abs() > 1e-3);
            let (_, g) = grad(&xs, |t, x| build(t, x)).unwrap();
            let fd = central_diff(&xs, 1e-6, &|p| value_of(p, &build));
            for (a, b) in g.iter().zip(&fd) {
                let err = (a - b).abs() / (1e-8 + a.abs().max(b.abs()));
                prop_assert!(err < 1e-6 || (a - b).abs() < 1e-9, "grad {} vs fd {}", a, b);
            }
        }
    }
}
