//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so inputs
//! always precede their consumers and [`Tape::backward`] is a single reverse
//! sweep. A fresh tape is built per forward pass.

use crate::error::{Result, TensorError};
use crate::linalg;
use crate::special;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Sin,
    Softplus,
    LogSigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How an operand's elements map onto the output of a broadcasting op.
#[derive(Debug)]
enum BMap {
    Same,
    Scalar,
    Index(Vec<usize>),
}

impl BMap {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BMap::Same => i,
            BMap::Scalar => 0,
            BMap::Index(m) => m[i],
        }
    }
}

/// `(outer, len, inner)` decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    #[inline]
    fn idx(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var, BMap, BMap),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, Axis),
    LogSumExp(Var, Axis),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    UnitDiagonal(Var),
    Copula {
        z: Var,
        r: Var,
        chol: Vec<f64>,
        alpha: Vec<f64>,
    },
    ProbitOfLogit(Var, Vec<bool>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_count: usize,
}

/// Gradients of a scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Raw gradient slice, `None` when unreachable from the root.
    pub fn get_raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn broadcast_map(src: &[usize], out: &[usize]) -> BMap {
    if src == out {
        return BMap::Same;
    }
    if src.iter().product::<usize>() == 1 {
        return BMap::Scalar;
    }
    let rank = out.len();
    let offset = rank - src.len();
    // Source strides aligned to output dims; broadcast dims get stride 0.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        if src[d] != 1 {
            strides[d + offset] = acc;
        }
        acc *= src[d];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    for _ in 0..numel {
        map.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    BMap::Index(map)
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok((t.rows(), t.cols()))
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probit inputs clamped away from 0 or 1 so far.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    // ----- elementwise --------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(&bad) = xv.data().iter().find(|&&v| v < 0.0) {
                return Err(TensorError::LogOfNegative(bad));
            }
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |v| -v,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sigmoid => special::sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Sin => f64::sin,
            UnaryKind::Softplus => special::softplus,
            UnaryKind::LogSigmoid => special::log_sigmoid,
        };
        let out = xv.map(f);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary(kind, x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x).expect("infallible")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x).expect("infallible")
    }

    /// Natural log; `ln 0 = -inf` is permitted, negative inputs are errors.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x).expect("infallible")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x).expect("infallible")
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sin, x).expect("infallible")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x).expect("infallible")
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::LogSigmoid, x).expect("infallible")
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape("elementwise", av.shape(), bv.shape())?;
        let ma = broadcast_map(av.shape(), &shape);
        let mb = broadcast_map(bv.shape(), &shape);
        let numel: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let mut out = Vec::with_capacity(numel);
        macro_rules! fill {
            ($f:expr) => {{
                let f = $f;
                match (&ma, &mb) {
                    (BMap::Same, BMap::Same) => {
                        out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                    }
                    _ => out.extend((0..numel).map(|i| f(ad[ma.at(i)], bd[mb.at(i)]))),
                }
            }};
        }
        match kind {
            BinaryKind::Add => fill!(|x: f64, y: f64| x + y),
            BinaryKind::Sub => fill!(|x: f64, y: f64| x - y),
            BinaryKind::Mul => fill!(|x: f64, y: f64| x * y),
            BinaryKind::Div => fill!(|x: f64, y: f64| x / y),
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Binary(kind, a, b, ma, mb), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `c * x` for a constant scalar `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    // ----- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix("matmul", self.value(a))?;
        let (k2, n) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_matrix("matmul_nt", self.value(a))?;
        let (n, k2) = require_matrix("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        require_matrix("transpose", self.value(x))?;
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let ax = Axis::of("sum_axis", &shape, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; ax.outer * ax.inner];
        for o in 0..ax.outer {
            for l in 0..ax.len {
                for i in 0..ax.inner {
                    out[o * ax.inner + i] += d[ax.idx(o, l, i)];
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::SumAxis(x, ax), rg))
    }

    /// Stable log-sum-exp over `axis`; `-inf` entries contribute nothing and
    /// an all `-inf` slice reduces to `-inf`.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let ax = Axis::of("logsumexp", &shape, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; ax.outer * ax.inner];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let m = (0..ax.len)
                    .map(|l| d[ax.idx(o, l, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                out[o * ax.inner + i] = if m.is_infinite() {
                    m
                } else {
                    let s: f64 = (0..ax.len).map(|l| (d[ax.idx(o, l, i)] - m).exp()).sum();
                    m + s.ln()
                };
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::LogSumExp(x, ax), rg))
    }

    /// Softmax over `axis`. A slice that is entirely `-inf` (fully masked)
    /// yields zeros.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let ax = Axis::of("softmax", &shape, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let m = (0..ax.len)
                    .map(|l| d[ax.idx(o, l, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let mut s = 0.0;
                for l in 0..ax.len {
                    let e = (d[ax.idx(o, l, i)] - m).exp();
                    out[ax.idx(o, l, i)] = e;
                    s += e;
                }
                for l in 0..ax.len {
                    out[ax.idx(o, l, i)] /= s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, ax), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let ax = Axis::of("log_softmax", &shape, axis)?;
        let d = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; d.len()];
        for o in 0..ax.outer {
            for i in 0..ax.inner {
                let m = (0..ax.len)
                    .map(|l| d[ax.idx(o, l, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let s: f64 = (0..ax.len).map(|l| (d[ax.idx(o, l, i)] - m).exp()).sum();
                let lse = m + s.ln();
                for l in 0..ax.len {
                    out[ax.idx(o, l, i)] = d[ax.idx(o, l, i)] - lse;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x, ax), rg))
    }

    // ----- indexing -----------------------------------------------------

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = require_matrix("slice_rows", self.value(x))?;
        if start > end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: r,
            });
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(end - start, c, data), Op::SliceRows(x, start), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = require_matrix("slice_cols", self.value(x))?;
        if start > end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: c,
            });
        }
        let d = self.value(x).data();
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, w, data), Op::SliceCols(x, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => require_matrix("concat_rows", self.value(p))?.1,
            None => 0,
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = require_matrix("concat_rows", self.value(p))?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, pc],
                });
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = match parts.first() {
            Some(&p) => require_matrix("concat_cols", self.value(p))?.0,
            None => 0,
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = require_matrix("concat_cols", self.value(p))?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![pr, pc],
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, data), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows of `x` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = require_matrix("gather_rows", self.value(x))?;
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, data),
            Op::GatherRows(x, idx.to_vec()),
            rg,
        ))
    }

    // ----- fused ops ----------------------------------------------------

    /// Square matrix with its diagonal overwritten by ones.
    pub fn unit_diagonal(&mut self, x: Var) -> Result<Var> {
        let (r, c) = require_matrix("unit_diagonal", self.value(x))?;
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "unit_diagonal",
                lhs: vec![r, c],
                rhs: vec![c, r],
            });
        }
        let mut out = self.value(x).clone();
        for i in 0..r {
            out.data_mut()[i * c + i] = 1.0;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::UnitDiagonal(x), rg))
    }

    /// Gaussian copula log-density `-1/2 ln|R| - 1/2 z^T (R^{-1} - I) z` for a
    /// single vector of normal scores `z` (shape `[n]`) and correlation `R`.
    pub fn gaussian_copula_loglik(&mut self, z: Var, r: Var) -> Result<Var> {
        let n = self.value(z).len();
        let rv = self.value(r);
        if rv.shape() != [n, n] {
            return Err(TensorError::ShapeMismatch {
                op: "gaussian_copula_loglik",
                lhs: vec![n],
                rhs: rv.shape().to_vec(),
            });
        }
        let (chol, _) = linalg::cholesky(rv.data(), n)?;
        let zd = self.value(z).data();
        let alpha = linalg::cholesky_solve(&chol, n, zd);
        let quad: f64 = zd.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let zz: f64 = zd.iter().map(|a| a * a).sum();
        let value = -0.5 * linalg::cholesky_log_det(&chol, n) - 0.5 * (quad - zz);
        let rg = self.rg(z) || self.rg(r);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Copula { z, r, chol, alpha },
            rg,
        ))
    }

    /// Elementwise `Phi^{-1}(sigmoid(x))`, with the tail probability clamped
    /// at `floor` (clamped entries pass no gradient).
    pub fn normal_quantile_of_logit(&mut self, x: Var, floor: f64) -> Var {
        let xv = self.value(x);
        let mut clamped = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for &v in xv.data() {
            let (z, c) = special::normal_quantile_of_logit(v, floor);
            out.push(z);
            clamped.push(c);
        }
        let shape = xv.shape().to_vec();
        self.clamp_count += clamped.iter().filter(|&&c| c).count();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::ProbitOfLogit(x, clamped),
            rg,
        )
    }

    // ----- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                if !self.rg(*x) {
                    return;
                }
                let xd = val(*x).data();
                let acc = accumulate(grads, *x, xd.len());
                for i in 0..xd.len() {
                    let d = match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Exp => out[i],
                        UnaryKind::Log => 1.0 / xd[i],
                        UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                        UnaryKind::Tanh => 1.0 - out[i] * out[i],
                        UnaryKind::Sin => xd[i].cos(),
                        UnaryKind::Softplus => special::sigmoid(xd[i]),
                        UnaryKind::LogSigmoid => special::sigmoid(-xd[i]),
                    };
                    acc[i] += g[i] * d;
                }
            }
            Op::Binary(kind, a, b, ma, mb) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if self.rg(*a) {
                    let acc = accumulate(grads, *a, ad.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (ma.at(i), mb.at(i));
                        acc[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => gi,
                            BinaryKind::Mul => gi * bd[ib],
                            BinaryKind::Div => gi / bd[ib],
                        };
                    }
                }
                if self.rg(*b) {
                    let acc = accumulate(grads, *b, bd.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (ma.at(i), mb.at(i));
                        acc[ib] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * ad[ia],
                            BinaryKind::Div => -gi * ad[ia] / (bd[ib] * bd[ib]),
                        };
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let acc = accumulate(grads, *x, g.len());
                    for (a, gi) in acc.iter_mut().zip(g) {
                        *a += gi * c;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.rg(*x) {
                    let acc = accumulate(grads, *x, g.len());
                    for (a, gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if self.rg(*a) {
                    // dA = G B^T
                    let acc = accumulate(grads, *a, m * k);
                    gemm_nt_acc(g, val(*b).data(), acc, m, n, k);
                }
                if self.rg(*b) {
                    // dB = A^T G
                    let acc = accumulate(grads, *b, k * n);
                    gemm_tn_acc(val(*a).data(), g, acc, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if self.rg(*a) {
                    // dA = G B
                    let acc = accumulate(grads, *a, m * k);
                    gemm_acc(g, val(*b).data(), acc, m, n, k);
                }
                if self.rg(*b) {
                    // dB = G^T A
                    let acc = accumulate(grads, *b, n * k);
                    gemm_tn_acc(g, val(*a).data(), acc, m, n, k);
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    let (r, c) = (val(*x).rows(), val(*x).cols());
                    let acc = accumulate(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            acc[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.rg(*x) {
                    let n = val(*x).len();
                    let acc = accumulate(grads, *x, n);
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::SumAxis(x, ax) => {
                if self.rg(*x) {
                    let acc = accumulate(grads, *x, val(*x).len());
                    for o in 0..ax.outer {
                        for l in 0..ax.len {
                            for i in 0..ax.inner {
                                acc[ax.idx(o, l, i)] += g[o * ax.inner + i];
                            }
                        }
                    }
                }
            }
            Op::LogSumExp(x, ax) => {
                if self.rg(*x) {
                    let xd = val(*x).data();
                    let acc = accumulate(grads, *x, xd.len());
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let y = out[o * ax.inner + i];
                            if !y.is_finite() {
                                continue;
                            }
                            let gi = g[o * ax.inner + i];
                            for l in 0..ax.len {
                                let j = ax.idx(o, l, i);
                                acc[j] += gi * (xd[j] - y).exp();
                            }
                        }
                    }
                }
            }
            Op::Softmax(x, ax) => {
                if self.rg(*x) {
                    let acc = accumulate(grads, *x, out.len());
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            let dot: f64 = (0..ax.len)
                                .map(|l| {
                                    let j = ax.idx(o, l, i);
                                    out[j] * g[j]
                                })
                                .sum();
                            for l in 0..ax.len {
                                let j = ax.idx(o, l, i);
                                acc[j] += out[j] * (g[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x, ax) => {
                if self.rg(*x) {
                    let acc = accumulate(grads, *x, out.len());
                    for o in 0..ax.outer {
                        for i in 0..ax.inner {
                            if out[ax.idx(o, 0, i)] == f64::NEG_INFINITY && ax.len > 0 {
                                let all_masked =
                                    (0..ax.len).all(|l| out[ax.idx(o, l, i)] == f64::NEG_INFINITY);
                                if all_masked {
                                    continue;
                                }
                            }
                            let gs: f64 = (0..ax.len).map(|l| g[ax.idx(o, l, i)]).sum();
                            for l in 0..ax.len {
                                let j = ax.idx(o, l, i);
                                acc[j] += g[j] - out[j].exp() * gs;
                            }
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                if self.rg(*x) {
                    let c = val(*x).cols();
                    let acc = accumulate(grads, *x, val(*x).len());
                    for (a, gi) in acc[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *a += gi;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if self.rg(*x) {
                    let (r, c) = (val(*x).rows(), val(*x).cols());
                    let w = node.value.cols();
                    let acc = accumulate(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..w {
                            acc[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.rg(p) {
                        let acc = accumulate(grads, p, n);
                        for (a, gi) in acc.iter_mut().zip(&g[offset..offset + n]) {
                            *a += gi;
                        }
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.rg(p) {
                        let acc = accumulate(grads, p, r * w);
                        for i in 0..r {
                            for j in 0..w {
                                acc[i * w + j] += g[i * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows(x, idx) => {
                if self.rg(*x) {
                    let c = val(*x).cols();
                    let acc = accumulate(grads, *x, val(*x).len());
                    for (row, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            acc[src * c + j] += g[row * c + j];
                        }
                    }
                }
            }
            Op::UnitDiagonal(x) => {
                if self.rg(*x) {
                    let n = node.value.rows();
                    let acc = accumulate(grads, *x, n * n);
                    for i in 0..n {
                        for j in 0..n {
                            if i != j {
                                acc[i * n + j] += g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Copula { z, r, chol, alpha } => {
                let n = alpha.len();
                let gi = g[0];
                if self.rg(*z) {
                    let zd = val(*z).data();
                    let acc = accumulate(grads, *z, n);
                    for i in 0..n {
                        acc[i] += gi * (zd[i] - alpha[i]);
                    }
                }
                if self.rg(*r) {
                    let inv = linalg::cholesky_inverse(chol, n);
                    let acc = accumulate(grads, *r, n * n);
                    for i in 0..n {
                        for j in 0..n {
                            acc[i * n + j] +=
                                gi * 0.5 * (alpha[i] * alpha[j] - inv[i * n + j]);
                        }
                    }
                }
            }
            Op::ProbitOfLogit(x, clamped) => {
                if self.rg(*x) {
                    let xd = val(*x).data();
                    let acc = accumulate(grads, *x, xd.len());
                    for i in 0..xd.len() {
                        if clamped[i] {
                            continue;
                        }
                        let ld = special::log_sigmoid(xd[i]) + special::log_sigmoid(-xd[i])
                            - special::normal_log_pdf(out[i]);
                        acc[i] += g[i] * ld.exp();
                    }
                }
            }
        }
    }
}
