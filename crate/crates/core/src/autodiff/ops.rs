//! Forward definitions of every differentiable operation.

use super::{Node, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, BroadcastIndex, Tensor};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Neg(Var),
    Abs(Var),
    Sign(Var),
    Pow(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    BroadcastTo(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Norm {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BcosGate {
        lin: Var,
        norm: Var,
        exponent: u32,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    BceOneHot {
        logits: Var,
        labels: Vec<usize>,
    },
}

/// Operation kind, used to audit recorded graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Neg,
    Abs,
    Sign,
    Pow,
    Exp,
    Log,
    Relu,
    Scale,
    AddScalar,
    Sum,
    Mean,
    Reshape,
    Permute,
    Concat,
    Slice,
    Gather,
    BroadcastTo,
    MatMul,
    Softmax,
    L2Norm,
    LayerNorm,
    BcosGate,
    CrossEntropy,
    BceOneHot,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Maximum(..) => OpKind::Maximum,
            Op::Neg(_) => OpKind::Neg,
            Op::Abs(_) => OpKind::Abs,
            Op::Sign(_) => OpKind::Sign,
            Op::Pow(..) => OpKind::Pow,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Relu(_) => OpKind::Relu,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Gather { .. } => OpKind::Gather,
            Op::BroadcastTo(_) => OpKind::BroadcastTo,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::L2Norm { .. } => OpKind::L2Norm,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BcosGate { .. } => OpKind::BcosGate,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::BceOneHot { .. } => OpKind::BceOneHot,
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Maximum(a, b) => vec![*a, *b],
            Op::Neg(x)
            | Op::Abs(x)
            | Op::Sign(x)
            | Op::Pow(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Relu(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Reshape(x)
            | Op::BroadcastTo(x) => vec![*x],
            Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::Softmax { x, .. }
            | Op::L2Norm { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma.iter().chain(beta.iter()).copied());
                v
            }
            Op::BcosGate { lin, norm, .. } => vec![*lin, *norm],
            Op::CrossEntropy { logits, .. } | Op::BceOneHot { logits, .. } => vec![*logits],
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `data` (with `shape`) permuted so that output axis `i` is
/// input axis `perm[i]`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        return (data.to_vec(), out_shape);
    }
    let last = rank - 1;
    let (last_extent, last_stride) = (out_shape[last], mapped[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        for j in 0..last_extent {
            out.push(data[base + j * last_stride]);
        }
        // advance the odometer over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += mapped[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= mapped[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Shapes for a (batched) matrix product. Returns (batch, m, k, n, b_batched).
pub(crate) fn matmul_dims(
    a: &[usize],
    b: &[usize],
    trans_b: bool,
) -> Result<(usize, usize, usize, usize, bool, Vec<usize>)> {
    let err = || {
        Error::dim(format!(
            "matmul of {a:?} and {b:?}{}",
            if trans_b { " (b transposed)" } else { "" }
        ))
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(err());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let b_batched = !b_batch.is_empty();
    if b_batched && a_batch != b_batch {
        return Err(err());
    }
    let mut out_shape = a_batch.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok((numel(a_batch), m, k, n, b_batched, out_shape))
}

impl Tape {
    fn record(&self, value: Tensor, op: Op) -> Var {
        let (requires_grad, signal) = {
            let nodes = self.nodes();
            let inputs = op.inputs();
            let rg = inputs.iter().any(|v| nodes[v.index()].requires_grad);
            let sig = match op {
                // attention weights are treated as constant mixing weights
                Op::Softmax { .. } | Op::L2Norm { .. } => false,
                _ => inputs.iter().any(|v| nodes[v.index()].signal),
            };
            (rg, sig)
        };
        self.push_node(Node {
            value,
            op,
            requires_grad,
            signal,
        })
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes()[x.index()].value.map(f);
        Ok(self.record(value, op))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let nodes = self.nodes();
            let (ta, tb) = (&nodes[a.index()].value, &nodes[b.index()].value);
            let bi = BroadcastIndex::new(ta.shape(), tb.shape())?;
            let (da, db) = (ta.data(), tb.data());
            let mut out = vec![0.0; bi.len()];
            bi.for_each(|o, ia, ib| out[o] = f(da[ia], db[ib]));
            Tensor::from_parts(bi.out_shape.clone(), out)
        };
        Ok(self.record(value, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties select (and route gradient to) `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Sign with `sign(0) = 0`; zero gradient everywhere.
    pub fn sign(&self, x: Var) -> Result<Var> {
        self.unary(x, sign0, Op::Sign(x))
    }

    pub fn pow(&self, x: Var, p: f64) -> Result<Var> {
        self.check(x)?;
        if p.fract() != 0.0 && self.nodes()[x.index()].value.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numerical(format!(
                "pow with non-integer exponent {p} needs a non-negative base"
            )));
        }
        self.unary(x, |v| v.powf(p), Op::Pow(x, p))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        if self.nodes()[x.index()].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical("log of a non-positive value".into()));
        }
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x, c))
    }

    fn reduce(&self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes();
            let t = &nodes[x.index()].value;
            match axis {
                None => {
                    let s = t.sum();
                    Tensor::scalar(if mean { s / t.len() as f64 } else { s })
                }
                Some(ax) => {
                    if ax >= t.rank() {
                        return Err(Error::dim(format!("axis {ax} for shape {:?}", t.shape())));
                    }
                    let (outer, len, inner) = axis_split(t.shape(), ax);
                    let d = t.data();
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            let row = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    let mut shape = t.shape().to_vec();
                    shape[ax] = 1;
                    Tensor::from_parts(shape, out)
                }
            }
        };
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.record(value, op))
    }

    /// Sum of all values, as a one-element tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        self.reduce(x, None, false)
    }

    /// Sum along `axis`, kept with extent 1.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), false)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.reduce(x, None, true)
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), true)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes()[x.index()].value.reshape(shape.to_vec())?;
        Ok(self.record(value, Op::Reshape(x)))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes();
            let t = &nodes[x.index()].value;
            let mut seen = vec![false; t.rank()];
            if perm.len() != t.rank()
                || perm
                    .iter()
                    .any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true))
            {
                return Err(Error::dim(format!("permutation {perm:?} for shape {:?}", t.shape())));
            }
            let (data, shape) = permute_data(t.data(), t.shape(), perm);
            Tensor::from_parts(shape, data)
        };
        Ok(self.record(value, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, x: Var, i: usize, j: usize) -> Result<Var> {
        let rank = self.shape(x)?.len();
        if i >= rank || j >= rank {
            return Err(Error::dim(format!("transpose axes ({i},{j}) for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(i, j);
        self.permute(x, &perm)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat of nothing"));
        }
        for &x in xs {
            self.check(x)?;
        }
        let value = {
            let nodes = self.nodes();
            let first = nodes[xs[0].index()].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::dim(format!("concat axis {axis} for shape {first:?}")));
            }
            let mut total = 0;
            for &x in xs {
                let s = nodes[x.index()].value.shape();
                let compatible =
                    s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::dim(format!("concat of {first:?} and {s:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(&first, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &x in xs {
                    let t = &nodes[x.index()].value;
                    let len = t.shape()[axis];
                    out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::from_parts(shape, out)
        };
        Ok(self.record(value, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes();
            let t = &nodes[x.index()].value;
            if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
                return Err(Error::dim(format!(
                    "slice {start}..{} on axis {axis} of {:?}",
                    start + len,
                    t.shape()
                )));
            }
            let (outer, ext, inner) = axis_split(t.shape(), axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, out)
        };
        Ok(self.record(value, Op::Slice { x, axis, start }))
    }

    /// Selects `index` positions along `axis` (repeats allowed).
    pub fn gather(&self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes();
            let t = &nodes[x.index()].value;
            if axis >= t.rank() || index.is_empty() || index.iter().any(|&i| i >= t.shape()[axis]) {
                return Err(Error::dim(format!("gather on axis {axis} of {:?}", t.shape())));
            }
            let (outer, ext, inner) = axis_split(t.shape(), axis);
            let mut out = Vec::with_capacity(outer * index.len() * inner);
            for o in 0..outer {
                for &i in index {
                    let base = (o * ext + i) * inner;
                    out.extend_from_slice(&t.data()[base..base + inner]);
                }
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = index.len();
            Tensor::from_parts(shape, out)
        };
        Ok(self.record(
            value,
            Op::Gather {
                x,
                axis,
                index: index.to_vec(),
            },
        ))
    }

    /// Cyclic shift by `shift` positions along `axis` (`out[i] = x[i - shift]`).
    pub fn roll(&self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let shape = self.shape(x)?;
        if axis >= shape.len() {
            return Err(Error::dim(format!("roll axis {axis} for shape {shape:?}")));
        }
        let n = shape[axis] as isize;
        let index: Vec<usize> = (0..n).map(|i| (i - shift).rem_euclid(n) as usize).collect();
        self.gather(x, axis, &index)
    }

    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes();
            let t = &nodes[x.index()].value;
            let bi = BroadcastIndex::new(t.shape(), shape)?;
            if bi.out_shape != shape {
                return Err(Error::dim(format!("cannot broadcast {:?} to {shape:?}", t.shape())));
            }
            let d = t.data();
            let mut out = vec![0.0; bi.len()];
            bi.for_each(|o, ia, _| out[o] = d[ia]);
            Tensor::from_parts(shape.to_vec(), out)
        };
        Ok(self.record(value, Op::BroadcastTo(x)))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared by every batch
    /// entry) or `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored as `[.., n, k]`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let nodes = self.nodes();
            let (ta, tb) = (&nodes[a.index()].value, &nodes[b.index()].value);
            let (batch, m, k, n, b_batched, out_shape) = matmul_dims(ta.shape(), tb.shape(), trans_b)?;
            let mut out = vec![0.0; batch * m * n];
            let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            if !b_batched {
                gemm(
                    batch * m,
                    k,
                    n,
                    ta.data(),
                    (k as isize, 1),
                    tb.data(),
                    b_strides,
                    &mut out,
                    0.0,
                );
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        b_strides,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
            }
            Tensor::from_parts(out_shape, out)
        };
        Ok(self.record(value, Op::MatMul { a, b, trans_b }))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let value = {
            let nodes = self.nodes();
            let t = &nodes[x.index()].value;
            if axis >= t.rank() {
                return Err(Error::dim(format!("softmax axis {axis} for shape {:?}", t.shape())));
            }
            let (outer, len, inner) = axis_split(t.shape(), axis);
            let d = t.data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (d[at(j)] - max).exp();
                        out[at(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[at(j)] /= total;
                    }
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        };
        Ok(self.record(value, Op::Softmax { x, axis }))
    }

    /// `sqrt(Σ x² + eps²)` along `axis`, kept with extent 1.
    pub fn l2_norm(&self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check(x)?;
        if eps < 0.0 {
            return Err(Error::Numerical(format!("negative norm epsilon {eps}")));
        }
        let value = {
            let nodes = self.nodes();
            let t = &nodes[x.index()].value;
            if axis >= t.rank() {
                return Err(Error::dim(format!("norm axis {axis} for shape {:?}", t.shape())));
            }
            let (outer, len, inner) = axis_split(t.shape(), axis);
            let d = t.data();
            let mut out = vec![eps * eps; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        let v = d[(o * len + j) * inner + i];
                        out[o * inner + i] += v * v;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v = v.sqrt());
            let mut shape = t.shape().to_vec();
            shape[axis] = 1;
            Tensor::from_parts(shape, out)
        };
        Ok(self.record(value, Op::L2Norm { x, axis }))
    }

    /// Normalization over the last axis with optional affine scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        self.check(x)?;
        for v in gamma.iter().chain(beta.iter()) {
            self.check(*v)?;
        }
        let (value, xhat, inv_std) = {
            let nodes = self.nodes();
            let t = &nodes[x.index()].value;
            let d = *t.shape().last().expect("rank >= 1");
            let affine = |v: Option<Var>| -> Result<Option<&[f64]>> {
                match v {
                    None => Ok(None),
                    Some(v) => {
                        let p = &nodes[v.index()].value;
                        if p.len() != d {
                            return Err(Error::dim(format!(
                                "norm parameter of shape {:?} for feature size {d}",
                                p.shape()
                            )));
                        }
                        Ok(Some(p.data()))
                    }
                }
            };
            let (g, b) = (affine(gamma)?, affine(beta)?);
            let rows = t.len() / d;
            let mut xhat = vec![0.0; t.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; t.len()];
            for r in 0..rows {
                let row = &t.data()[r * d..(r + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mu) * is;
                    xhat[r * d + j] = h;
                    let mut y = h;
                    if let Some(g) = g {
                        y *= g[j];
                    }
                    if let Some(b) = b {
                        y += b[j];
                    }
                    out[r * d + j] = y;
                }
            }
            (Tensor::from_parts(t.shape().to_vec(), out), xhat, inv_std)
        };
        Ok(self.record(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// B-cos* output from a projection onto unit weights.
    ///
    /// With `lin = ⟨ŵ, x⟩` and `norm = ‖x‖` (shape `[.., 1]`), returns
    /// `lin · |lin/norm|^(B-1)`, which equals `‖x‖·|c|^B·sgn(c)`. Inputs with
    /// zero norm map to zero.
    pub fn bcos_gate(&self, lin: Var, norm: Var, exponent: u32) -> Result<Var> {
        self.check(lin)?;
        self.check(norm)?;
        if exponent == 0 {
            return Err(Error::Config("B-cos exponent must be at least 1".into()));
        }
        let value = {
            let nodes = self.nodes();
            let (tl, tn) = (&nodes[lin.index()].value, &nodes[norm.index()].value);
            let d = *tl.shape().last().expect("rank >= 1");
            let rows = tl.len() / d;
            if tn.len() != rows || tn.shape().last() != Some(&1) {
                return Err(Error::dim(format!(
                    "B-cos norm of shape {:?} for projection {:?}",
                    tn.shape(),
                    tl.shape()
                )));
            }
            let mut out = vec![0.0; tl.len()];
            for r in 0..rows {
                let nv = tn.data()[r];
                for j in 0..d {
                    let l = tl.data()[r * d + j];
                    out[r * d + j] = bcos_scalar(l, nv, exponent);
                }
            }
            Tensor::from_parts(tl.shape().to_vec(), out)
        };
        Ok(self.record(value, Op::BcosGate { lin, norm, exponent }))
    }

    /// Mean categorical cross-entropy of `[batch, K]` logits.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let value = {
            let nodes = self.nodes();
            let t = &nodes[logits.index()].value;
            let (b, k) = check_logits(t, labels)?;
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let row = &t.data()[r * k..(r + 1) * k];
                total += log_sum_exp(row) - row[y];
            }
            Tensor::scalar(total / b as f64)
        };
        Ok(self.record(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean per-logit binary cross-entropy against one-hot targets.
    pub fn bce_one_hot(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let value = {
            let nodes = self.nodes();
            let t = &nodes[logits.index()].value;
            let (b, k) = check_logits(t, labels)?;
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                for j in 0..k {
                    let z = t.data()[r * k + j];
                    let target = if j == y { 1.0 } else { 0.0 };
                    total += softplus(z) - target * z;
                }
            }
            Tensor::scalar(total / (b * k) as f64)
        };
        Ok(self.record(
            value,
            Op::BceOneHot {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }
}

pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn bcos_scalar(lin: f64, norm: f64, exponent: u32) -> f64 {
    if norm <= 0.0 {
        return 0.0;
    }
    let c = lin / norm;
    lin * c.abs().powi(exponent as i32 - 1)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_logits(t: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(format!("logits must be [batch, K], got {:?}", t.shape())));
    }
    let (b, k) = (t.shape()[0], t.shape()[1]);
    if labels.len() != b {
        return Err(Error::dim(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Validation(format!("label {bad} out of range for {k} classes")));
    }
    Ok((b, k))
}
