//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive pushes one node onto the [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.
//! Leaf gradients accumulate across calls until [`Tape::zero_grad`].
//!
//! Binary elementwise operations require equal shapes. The only implicit
//! broadcast is scalar-with-tensor (an operand with exactly one element);
//! per-channel broadcasts go through the explicit [`Tape::add_bias`] and
//! [`Tape::mul_channel`] primitives.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor for the normalization primitives.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stand-in derivative for the Heaviside spike function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surrogate {
    /// `1/(2a)` inside `|v - v_th| < a`, zero outside.
    Rectangular { half_width: f64 },
    /// The exact almost-everywhere derivative, i.e. zero.
    Zero,
}

impl Surrogate {
    pub fn derivative(self, distance: f64) -> f64 {
        match self {
            Surrogate::Rectangular { half_width } => {
                if distance.abs() < half_width {
                    1.0 / (2.0 * half_width)
                } else {
                    0.0
                }
            }
            Surrogate::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    Neg(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Expand(Var, usize),
    Softmax(Var, usize),
    AddBias(Var, Var),
    MulChannel(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d(Var, Var),
    ModeProduct(Var, Var, usize),
    Stack(Vec<Var>),
    IndexSelect(Var, Vec<usize>),
    Spike {
        v: Var,
        thresholds: Vec<f64>,
        surrogate: Surrogate,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | AddBias(a, b)
            | MulChannel(a, b) | Conv1d(a, b) | ModeProduct(a, b, _) => vec![*a, *b],
            AddConst(a) | MulConst(a, _) | Neg(a) | Sigmoid(a) | Relu(a) | Exp(a) | Log(a)
            | Sqrt(a) | Permute(a, _) | Reshape(a) | SumAll(a) | SumAxis(a, _)
            | MaxAxis(a, _) | Expand(a, _) | Softmax(a, _) | IndexSelect(a, _) => vec![*a],
            LayerNorm { x, gain, bias, .. } | BatchNorm { x, gain, bias, .. } => {
                vec![*x, *gain, *bias]
            }
            Stack(vs) => vs.clone(),
            Spike { v, .. } => vec![*v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

// out[m×n] += a[p×m]ᵀ · b[p×n]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], p: usize, m: usize, n: usize) {
    for q in 0..p {
        let brow = &b[q * n..(q + 1) * n];
        for i in 0..m {
            let aqi = a[q * m + i];
            if aqi == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aqi * bv;
            }
        }
    }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Accumulated gradient of a leaf, `None` until a backward pass reaches it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.value(v).shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::from_parts(ta.shape().to_vec(), data))
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::shape(name, ta.shape(), tb.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a), "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::MulConst(a, c), "mul_scalar")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a), "neg")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("non-positive input {bad}"),
            });
        }
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a), "sqrt")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- shape ---------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Domain {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let (data, shape) = permute_data(t.data(), t.shape(), perm);
        self.push(Tensor::from_parts(shape, data), Op::Permute(a, perm.to_vec()), "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Axis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    /// Repeats a size-1 axis `n` times.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis(t.shape(), axis)?;
        if t.shape()[axis] != 1 || n == 0 {
            return Err(Error::Domain {
                op: "expand",
                msg: format!("axis {axis} of {:?} must have size 1", t.shape()),
            });
        }
        let (outer, _, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(t.numel() * n);
        for o in 0..outer {
            let chunk = &t.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(chunk);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = n;
        self.push(Tensor::from_parts(shape, data), Op::Expand(a, axis), "expand")
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars.first().ok_or(Error::Empty("stack"))?;
        let shape = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(shape.iter().product::<usize>() * vars.len());
        for v in vars {
            let t = self.value(*v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("stack", &shape, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut out_shape = vec![vars.len()];
        out_shape.extend_from_slice(&shape);
        self.push(Tensor::from_parts(out_shape, data), Op::Stack(vars.to_vec()), "stack")
    }

    /// Gathers slices along the leading axis.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rows = t.shape()[0];
        let width = t.numel() / rows;
        if indices.is_empty() {
            return Err(Error::Empty("index_select"));
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::Domain {
                    op: "index_select",
                    msg: format!("index {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        self.push(
            Tensor::from_parts(shape, data),
            Op::IndexSelect(a, indices.to_vec()),
            "index_select",
        )
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis(t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &t.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        self.push(Tensor::from_parts(shape, out), Op::SumAxis(a, axis), "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(a), axis)?;
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Max over `axis`, keeping it with size 1. Ties resolve to the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis(t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let src = (o * len + k) * inner + i;
                    let dst = o * inner + i;
                    if t.data()[src] > out[dst] {
                        out[dst] = t.data()[src];
                        arg[dst] = src;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        self.push(Tensor::from_parts(shape, out), Op::MaxAxis(a, arg), "max_axis")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis(t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| t.data()[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (t.data()[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        self.push(Tensor::from_parts(t.shape().to_vec(), out), Op::Softmax(a, axis), "softmax")
    }

    // ---- linear algebra ------------------------------------------------------

    /// Matrix product over the last two axes. `b` is either a plain matrix
    /// shared across all leading indices of `a`, or has the same leading
    /// axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_blk = &ta.data()[bi * m * k..(bi + 1) * m * k];
            let b_blk = if shared {
                tb.data()
            } else {
                &tb.data()[bi * k * n..(bi + 1) * k * n]
            };
            gemm_nn(a_blk, b_blk, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend_from_slice(&[m, n]);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), "matmul")
    }

    /// Mode-`mode` product `t ×_mode m` with `m` of shape `[r, t.shape[mode]]`
    /// (modes are zero-based). The contracted dimension is replaced by `r`.
    pub fn mode_product(&mut self, t: Var, m: Var, mode: usize) -> Result<Var> {
        let (tt, tm) = (self.value(t), self.value(m));
        check_axis(tt.shape(), mode)?;
        if tm.rank() != 2 || tm.shape()[1] != tt.shape()[mode] {
            return Err(Error::shape("mode_product", tt.shape(), tm.shape()));
        }
        let (outer, len, inner) = split_axis(tt.shape(), mode);
        let r = tm.shape()[0];
        let mut out = vec![0.0; outer * r * inner];
        for o in 0..outer {
            let src = &tt.data()[o * len * inner..(o + 1) * len * inner];
            gemm_nn(tm.data(), src, &mut out[o * r * inner..(o + 1) * r * inner], r, len, inner);
        }
        let mut shape = tt.shape().to_vec();
        shape[mode] = r;
        self.push(Tensor::from_parts(shape, out), Op::ModeProduct(t, m, mode), "mode_product")
    }

    /// Adds `b` (shape `[C]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = *tx.shape().last().unwrap();
        if tb.numel() != c {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % c])
            .collect();
        self.push(Tensor::from_parts(tx.shape().to_vec(), data), Op::AddBias(x, b), "add_bias")
    }

    /// Multiplies `x` by `g` (shape `[C]`) along the last axis.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let c = *tx.shape().last().unwrap();
        if tg.numel() != c {
            return Err(Error::shape("mul_channel", tx.shape(), tg.shape()));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * tg.data()[i % c])
            .collect();
        self.push(
            Tensor::from_parts(tx.shape().to_vec(), data),
            Op::MulChannel(x, g),
            "mul_channel",
        )
    }

    /// Normalizes each row along the last axis, then applies `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), self.value(gain).shape()));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * inv;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let shape = tx.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Training-mode batch normalization: per channel (last axis) over every
    /// other axis. Returns the normalized output plus the batch mean and
    /// biased variance per channel.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape("batch_norm", tx.shape(), self.value(gain).shape()));
        }
        let n = tx.numel() / c;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..n {
            add_into(&mut mean, &tx.data()[r * c..(r + 1) * c]);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in 0..n {
            for j in 0..c {
                var[j] += (tx.data()[r * c + j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let xhat: Vec<f64> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % c] + b[i % c])
            .collect();
        let shape = tx.shape().to_vec();
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "batch_norm",
        )?;
        Ok((v, mean, var))
    }

    /// Same-padded 1-D convolution along axis 1 of `x: [B, L, C_in]` with
    /// `w: [K, C_in, C_out]`, stride 1, odd `K`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 3 || tw.rank() != 3 || tw.shape()[1] != tx.shape()[2] || tw.shape()[0] % 2 == 0
        {
            return Err(Error::shape("conv1d", tx.shape(), tw.shape()));
        }
        let (b, l, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (k, cout) = (tw.shape()[0], tw.shape()[2]);
        let pad = k / 2;
        let mut out = vec![0.0; b * l * cout];
        for bi in 0..b {
            for t in 0..l {
                let dst = &mut out[(bi * l + t) * cout..(bi * l + t + 1) * cout];
                for j in 0..k {
                    let src_t = t as isize + j as isize - pad as isize;
                    if src_t < 0 || src_t >= l as isize {
                        continue;
                    }
                    let row = &tx.data()[(bi * l + src_t as usize) * cin..][..cin];
                    let wj = &tw.data()[j * cin * cout..(j + 1) * cin * cout];
                    gemm_nn(row, wj, dst, 1, cin, cout);
                }
            }
        }
        self.push(Tensor::from_parts(vec![b, l, cout], out), Op::Conv1d(x, w), "conv1d")
    }

    /// Heaviside step `v ≥ v_th` with a surrogate derivative. `thresholds`
    /// holds one value per index of the leading axis of `v`, or a single
    /// value for all entries.
    pub fn spike(&mut self, v: Var, thresholds: &[f64], surrogate: Surrogate) -> Result<Var> {
        let tv = self.value(v);
        let lead = tv.shape()[0];
        if thresholds.len() != 1 && thresholds.len() != lead {
            return Err(Error::shape("spike", tv.shape(), &[thresholds.len()]));
        }
        let per = tv.numel() / thresholds.len();
        let out = tv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if x >= thresholds[i / per] { 1.0 } else { 0.0 })
            .collect();
        self.push(
            Tensor::from_parts(tv.shape().to_vec(), out),
            Op::Spike {
                v,
                thresholds: thresholds.to_vec(),
                surrogate,
            },
            "spike",
        )
    }

    // ---- backward --------------------------------------------------------------

    /// Propagates d`loss` to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => add_into(acc, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Gradient for operand `v` of a scalar-broadcasting binary op, given the
    /// per-element contribution computed at output resolution.
    fn reduce_broadcast(&self, v: Var, contrib: Vec<f64>) -> Vec<f64> {
        if self.value(v).numel() == 1 && contrib.len() != 1 {
            vec![contrib.iter().sum()]
        } else {
            contrib
        }
    }

    fn broadcast_value(&self, v: Var, i: usize) -> f64 {
        let d = self.value(v).data();
        if d.len() == 1 {
            d[0]
        } else {
            d[i]
        }
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                let ga = self.reduce_broadcast(*a, g.to_vec());
                let gb = self.reduce_broadcast(*b, g.to_vec());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_broadcast(*a, g.to_vec());
                let gb = self.reduce_broadcast(*b, g.iter().map(|x| -x).collect());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let c = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * self.broadcast_value(*b, k))
                        .collect();
                    let ga = self.reduce_broadcast(*a, c);
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let c = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| gk * self.broadcast_value(*a, k))
                        .collect();
                    let gb = self.reduce_broadcast(*b, c);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::Neg(a) => self.accumulate(grads, *a, g.iter().map(|x| -x).collect()),
            Op::Sigmoid(a) => {
                let c = g.iter().zip(y).map(|(gk, s)| gk * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let c = g.iter().zip(x).map(|(gk, &xk)| if xk > 0.0 { *gk } else { 0.0 }).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Exp(a) => {
                let c = g.iter().zip(y).map(|(gk, e)| gk * e).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let c = g.iter().zip(x).map(|(gk, xk)| gk / xk).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Sqrt(a) => {
                let c = g.iter().zip(y).map(|(gk, s)| gk / (2.0 * s)).collect();
                self.accumulate(grads, *a, c);
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Permute(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let (data, _) = permute_data(g, self.nodes[i].value.shape(), &inv);
                self.accumulate(grads, *a, data);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.value(*a).shape(), *axis);
                let mut c = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        c.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, c);
            }
            Op::MaxAxis(a, arg) => {
                let mut c = vec![0.0; self.value(*a).numel()];
                for (k, &src) in arg.iter().enumerate() {
                    c[src] += g[k];
                }
                self.accumulate(grads, *a, c);
            }
            Op::Expand(a, axis) => {
                let (outer, len, inner) = split_axis(self.nodes[i].value.shape(), *axis);
                let mut c = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        add_into(
                            &mut c[o * inner..(o + 1) * inner],
                            &g[(o * len + k) * inner..(o * len + k + 1) * inner],
                        );
                    }
                }
                self.accumulate(grads, *a, c);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(self.nodes[i].value.shape(), *axis);
                let mut c = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + j;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            c[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, c);
            }
            Op::AddBias(x, b) => {
                let cdim = self.value(*b).numel();
                let mut gb = vec![0.0; cdim];
                for (k, gk) in g.iter().enumerate() {
                    gb[k % cdim] += gk;
                }
                self.accumulate(grads, *x, g.to_vec());
                self.accumulate(grads, *b, gb);
            }
            Op::MulChannel(x, w) => {
                let cdim = self.value(*w).numel();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut gw = vec![0.0; cdim];
                for (k, gk) in g.iter().enumerate() {
                    gw[k % cdim] += gk * xv[k];
                }
                let gx = g.iter().enumerate().map(|(k, gk)| gk * wv[k % cdim]).collect();
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let rows = xhat.len() / d;
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut gx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let k = r * d + j;
                        ggain[j] += g[k] * xhat[k];
                        gbias[j] += g[k];
                        let dh = g[k] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[k];
                    }
                    for j in 0..d {
                        let k = r * d + j;
                        let dh = g[k] * gv[j];
                        gx[k] = inv_std[r] / d as f64
                            * (d as f64 * dh - sum_dh - xhat[k] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
                self.accumulate(grads, *bias, gbias);
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                let n = xhat.len() / c;
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut sum_dh = vec![0.0; c];
                let mut sum_dh_h = vec![0.0; c];
                for (k, gk) in g.iter().enumerate() {
                    let j = k % c;
                    ggain[j] += gk * xhat[k];
                    gbias[j] += gk;
                    let dh = gk * gv[j];
                    sum_dh[j] += dh;
                    sum_dh_h[j] += dh * xhat[k];
                }
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(k, gk)| {
                        let j = k % c;
                        let dh = gk * gv[j];
                        inv_std[j] / n as f64 * (n as f64 * dh - sum_dh[j] - xhat[k] * sum_dh_h[j])
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
                self.accumulate(grads, *bias, gbias);
            }
            Op::Conv1d(x, w) => self.backprop_conv1d(*x, *w, g, grads),
            Op::ModeProduct(t, m, mode) => {
                let (tt, tm) = (self.value(*t), self.value(*m));
                let (outer, len, inner) = split_axis(tt.shape(), *mode);
                let r = tm.shape()[0];
                if self.nodes[t.0].requires_grad {
                    let mut gt = vec![0.0; tt.numel()];
                    for o in 0..outer {
                        gemm_tn(
                            tm.data(),
                            &g[o * r * inner..(o + 1) * r * inner],
                            &mut gt[o * len * inner..(o + 1) * len * inner],
                            r,
                            len,
                            inner,
                        );
                    }
                    self.accumulate(grads, *t, gt);
                }
                if self.nodes[m.0].requires_grad {
                    let mut gm = vec![0.0; tm.numel()];
                    for o in 0..outer {
                        gemm_nt(
                            &g[o * r * inner..(o + 1) * r * inner],
                            &tt.data()[o * len * inner..(o + 1) * len * inner],
                            &mut gm,
                            r,
                            inner,
                            len,
                        );
                    }
                    self.accumulate(grads, *m, gm);
                }
            }
            Op::Stack(vars) => {
                let width = g.len() / vars.len();
                for (k, v) in vars.iter().enumerate() {
                    self.accumulate(grads, *v, g[k * width..(k + 1) * width].to_vec());
                }
            }
            Op::IndexSelect(a, indices) => {
                let ta = self.value(*a);
                let width = ta.numel() / ta.shape()[0];
                let mut c = vec![0.0; ta.numel()];
                for (r, &src) in indices.iter().enumerate() {
                    add_into(&mut c[src * width..(src + 1) * width], &g[r * width..(r + 1) * width]);
                }
                self.accumulate(grads, *a, c);
            }
            Op::Spike {
                v,
                thresholds,
                surrogate,
            } => {
                let tv = self.value(*v).data();
                let per = tv.len() / thresholds.len();
                let c = g
                    .iter()
                    .enumerate()
                    .map(|(k, gk)| gk * surrogate.derivative(tv[k] - thresholds[k / per]))
                    .collect();
                self.accumulate(grads, *v, c);
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = ta.shape();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = *tb.shape().last().unwrap();
        let shared = tb.rank() == 2;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        if self.nodes[a.0].requires_grad {
            let mut ga = vec![0.0; ta.numel()];
            for bi in 0..batch {
                let b_blk = if shared {
                    tb.data()
                } else {
                    &tb.data()[bi * k * n..(bi + 1) * k * n]
                };
                gemm_nt(
                    &g[bi * m * n..(bi + 1) * m * n],
                    b_blk,
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            self.accumulate(grads, a, ga);
        }
        if self.nodes[b.0].requires_grad {
            let mut gb = vec![0.0; tb.numel()];
            if shared {
                gemm_tn(ta.data(), g, &mut gb, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    gemm_tn(
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            self.accumulate(grads, b, gb);
        }
    }

    fn backprop_conv1d(&self, x: Var, w: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (b, l, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (k, cout) = (tw.shape()[0], tw.shape()[2]);
        let pad = k / 2;
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let mut gx = vec![0.0; if need_x { tx.numel() } else { 0 }];
        let mut gw = vec![0.0; if need_w { tw.numel() } else { 0 }];
        for bi in 0..b {
            for t in 0..l {
                let gy = &g[(bi * l + t) * cout..(bi * l + t + 1) * cout];
                for j in 0..k {
                    let src_t = t as isize + j as isize - pad as isize;
                    if src_t < 0 || src_t >= l as isize {
                        continue;
                    }
                    let off = (bi * l + src_t as usize) * cin;
                    let wj = &tw.data()[j * cin * cout..(j + 1) * cin * cout];
                    if need_x {
                        gemm_nt(gy, wj, &mut gx[off..off + cin], 1, cout, cin);
                    }
                    if need_w {
                        gemm_tn(
                            &tx.data()[off..off + cin],
                            gy,
                            &mut gw[j * cin * cout..(j + 1) * cin * cout],
                            1,
                            cin,
                            cout,
                        );
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, gx);
        }
        if need_w {
            self.accumulate(grads, w, gw);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
