//! Reverse sweep and the local backward rule of each operation.

use super::ops::{axis_split, inverse_perm, matmul_dims, permute_data, sigmoid, Op};
use super::Node;
use crate::error::{Error, Result};
use crate::tensor::{gemm, BroadcastIndex, Tensor};

type Grads = Vec<Option<Vec<f64>>>;

pub(super) fn sweep(nodes: &[Node], root: usize, seed: Vec<f64>) -> Result<Grads> {
    let mut grads: Grads = vec![None; nodes.len()];
    grads[root] = Some(seed);
    for id in (0..=root).rev() {
        let node = &nodes[id];
        if !node.requires_grad || matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        for (input, contribution) in local_backward(nodes, node, &g, &|v| nodes[v.index()].requires_grad)? {
            let slot = &mut grads[input];
            match slot {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                None => *slot = Some(contribution),
            }
        }
        grads[id] = Some(g);
    }
    for (id, node) in nodes.iter().enumerate() {
        if !node.requires_grad {
            grads[id] = None;
        }
    }
    Ok(grads)
}

fn val(nodes: &[Node], v: super::Var) -> &Tensor {
    &nodes[v.index()].value
}

/// Reduces a gradient over broadcast axes back to an operand's shape.
fn binary_grads(
    nodes: &[Node],
    wants: Wants<'_>,
    a: super::Var,
    b: super::Var,
    g: &[f64],
    da_db: impl Fn(f64, f64) -> (f64, f64),
) -> Result<Vec<(usize, Vec<f64>)>> {
    let (ta, tb) = (val(nodes, a), val(nodes, b));
    let bi = BroadcastIndex::new(ta.shape(), tb.shape())?;
    let (xa, xb) = (ta.data(), tb.data());
    let mut ga = vec![0.0; xa.len()];
    let mut gb = vec![0.0; xb.len()];
    bi.for_each(|o, ia, ib| {
        let (da, db) = da_db(xa[ia], xb[ib]);
        ga[ia] += g[o] * da;
        gb[ib] += g[o] * db;
    });
    let mut out = Vec::with_capacity(2);
    if wants(a) {
        out.push((a.index(), ga));
    }
    if wants(b) {
        out.push((b.index(), gb));
    }
    Ok(out)
}

fn unary_grad(nodes: &[Node], x: super::Var, g: &[f64], d: impl Fn(f64) -> f64) -> Vec<(usize, Vec<f64>)> {
    let gx = val(nodes, x).data().iter().zip(g).map(|(&v, &gv)| gv * d(v)).collect();
    vec![(x.index(), gx)]
}

pub(super) type Wants<'a> = &'a dyn Fn(super::Var) -> bool;

pub(super) fn local_backward(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    wants: Wants<'_>,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let out = &node.value;
    let res = match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => binary_grads(nodes, wants, *a, *b, g, |_, _| (1.0, 1.0))?,
        Op::Sub(a, b) => binary_grads(nodes, wants, *a, *b, g, |_, _| (1.0, -1.0))?,
        Op::Mul(a, b) => binary_grads(nodes, wants, *a, *b, g, |x, y| (y, x))?,
        Op::Div(a, b) => binary_grads(nodes, wants, *a, *b, g, |x, y| (1.0 / y, -x / (y * y)))?,
        Op::Maximum(a, b) => binary_grads(
            nodes,
            wants,
            *a,
            *b,
            g,
            |x, y| if x >= y { (1.0, 0.0) } else { (0.0, 1.0) },
        )?,
        Op::Neg(x) => unary_grad(nodes, *x, g, |_| -1.0),
        Op::Abs(x) => unary_grad(nodes, *x, g, super::ops::sign0),
        Op::Sign(x) => unary_grad(nodes, *x, g, |_| 0.0),
        Op::Pow(x, p) => {
            let p = *p;
            unary_grad(nodes, *x, g, |v| if p == 0.0 { 0.0 } else { p * v.powf(p - 1.0) })
        }
        Op::Exp(x) => {
            let gx = out.data().iter().zip(g).map(|(e, gv)| e * gv).collect();
            vec![(x.index(), gx)]
        }
        Op::Log(x) => unary_grad(nodes, *x, g, |v| 1.0 / v),
        Op::Relu(x) => unary_grad(nodes, *x, g, |v| if v > 0.0 { 1.0 } else { 0.0 }),
        Op::Scale(x, c) => vec![(x.index(), g.iter().map(|v| v * c).collect())],
        Op::AddScalar(x, _) | Op::Reshape(x) => vec![(x.index(), g.to_vec())],
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let t = val(nodes, *x);
            let mean = matches!(node.op, Op::Mean { .. });
            match axis {
                None => {
                    let s = if mean { g[0] / t.len() as f64 } else { g[0] };
                    vec![(x.index(), vec![s; t.len()])]
                }
                Some(ax) => {
                    let (outer, len, inner) = axis_split(t.shape(), *ax);
                    let s = if mean { 1.0 / len as f64 } else { 1.0 };
                    let mut gx = vec![0.0; t.len()];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] = g[o * inner + i] * s;
                            }
                        }
                    }
                    vec![(x.index(), gx)]
                }
            }
        }
        Op::Permute { x, perm } => {
            let (gx, _) = permute_data(g, out.shape(), &inverse_perm(perm));
            vec![(x.index(), gx)]
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut res = Vec::new();
            let mut offset = 0;
            for x in xs {
                let len = val(nodes, *x).shape()[*axis];
                if wants(*x) {
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[base..base + len * inner]);
                    }
                    res.push((x.index(), gx));
                }
                offset += len;
            }
            res
        }
        Op::Slice { x, axis, start } => {
            let t = val(nodes, *x);
            let (outer, ext, inner) = axis_split(t.shape(), *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; t.len()];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(x.index(), gx)]
        }
        Op::Gather { x, axis, index } => {
            let t = val(nodes, *x);
            let (outer, ext, inner) = axis_split(t.shape(), *axis);
            let mut gx = vec![0.0; t.len()];
            for o in 0..outer {
                for (j, &i) in index.iter().enumerate() {
                    let src = (o * index.len() + j) * inner;
                    let dst = (o * ext + i) * inner;
                    for k in 0..inner {
                        gx[dst + k] += g[src + k];
                    }
                }
            }
            vec![(x.index(), gx)]
        }
        Op::BroadcastTo(x) => {
            let t = val(nodes, *x);
            let bi = BroadcastIndex::new(t.shape(), out.shape())?;
            let mut gx = vec![0.0; t.len()];
            bi.for_each(|o, ia, _| gx[ia] += g[o]);
            vec![(x.index(), gx)]
        }
        Op::MatMul { a, b, trans_b } => matmul_backward(nodes, wants, *a, *b, *trans_b, g)?,
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let p = out.data();
            let mut gx = vec![0.0; p.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * p[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = p[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![(x.index(), gx)]
        }
        Op::L2Norm { x, axis } => {
            let t = val(nodes, *x);
            let (outer, len, inner) = axis_split(t.shape(), *axis);
            let mut gx = vec![0.0; t.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let norm = out.data()[o * inner + i];
                    if norm == 0.0 {
                        continue;
                    }
                    let s = g[o * inner + i] / norm;
                    for j in 0..len {
                        let at = (o * len + j) * inner + i;
                        gx[at] = t.data()[at] * s;
                    }
                }
            }
            vec![(x.index(), gx)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = *out.shape().last().expect("rank >= 1");
            let rows = out.len() / d;
            let gam = gamma.map(|v| val(nodes, v).data());
            let mut res = Vec::new();
            if wants(*x) {
                let mut gx = vec![0.0; out.len()];
                for r in 0..rows {
                    let row = r * d..(r + 1) * d;
                    let gh: Vec<f64> = g[row.clone()]
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * gam.map_or(1.0, |gm| gm[j]))
                        .collect();
                    let xh = &xhat[row.clone()];
                    let mean_gh = gh.iter().sum::<f64>() / d as f64;
                    let mean_ghx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                    }
                }
                res.push((x.index(), gx));
            }
            if let Some(gv) = gamma.filter(|v| wants(*v)) {
                let mut gg = vec![0.0; d];
                for (i, (gi, hi)) in g.iter().zip(xhat).enumerate() {
                    gg[i % d] += gi * hi;
                }
                res.push((gv.index(), gg));
            }
            if let Some(bv) = beta.filter(|v| wants(*v)) {
                let mut gb = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    gb[i % d] += gi;
                }
                res.push((bv.index(), gb));
            }
            res
        }
        Op::BcosGate { lin, norm, exponent } => {
            let (tl, tn) = (val(nodes, *lin), val(nodes, *norm));
            let d = *tl.shape().last().expect("rank >= 1");
            let b = *exponent as i32;
            let mut gl = vec![0.0; tl.len()];
            let mut gn = vec![0.0; tn.len()];
            for (r, (gnr, &nv)) in gn.iter_mut().zip(tn.data()).enumerate() {
                if nv <= 0.0 {
                    continue;
                }
                for j in 0..d {
                    let i = r * d + j;
                    let c = tl.data()[i] / nv;
                    let cb1 = c.abs().powi(b - 1);
                    // d/dlin = B|c|^(B-1); d/dnorm = -(B-1)|c|^(B-1)·c
                    gl[i] = g[i] * f64::from(b) * cb1;
                    *gnr -= g[i] * f64::from(b - 1) * cb1 * c;
                }
            }
            let mut res = Vec::new();
            if wants(*lin) {
                res.push((lin.index(), gl));
            }
            if wants(*norm) {
                res.push((norm.index(), gn));
            }
            res
        }
        Op::CrossEntropy { logits, labels } => {
            let t = val(nodes, *logits);
            let k = t.shape()[1];
            let bsz = labels.len() as f64;
            let mut gx = vec![0.0; t.len()];
            for (r, &y) in labels.iter().enumerate() {
                let row = &t.data()[r * k..(r + 1) * k];
                let lse = super::ops::log_sum_exp(row);
                for j in 0..k {
                    let p = (row[j] - lse).exp();
                    gx[r * k + j] = g[0] * (p - if j == y { 1.0 } else { 0.0 }) / bsz;
                }
            }
            vec![(logits.index(), gx)]
        }
        Op::BceOneHot { logits, labels } => {
            let t = val(nodes, *logits);
            let k = t.shape()[1];
            let n = t.len() as f64;
            let mut gx = vec![0.0; t.len()];
            for (r, &y) in labels.iter().enumerate() {
                for j in 0..k {
                    let z = t.data()[r * k + j];
                    gx[r * k + j] = g[0] * (sigmoid(z) - if j == y { 1.0 } else { 0.0 }) / n;
                }
            }
            vec![(logits.index(), gx)]
        }
    };
    for (id, grad) in &res {
        if grad.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical(format!(
                "NaN gradient produced by {:?} for input {id}",
                node.op.kind()
            )));
        }
    }
    Ok(res)
}

pub(super) fn matmul_backward(
    nodes: &[Node],
    wants: Wants<'_>,
    a: super::Var,
    b: super::Var,
    trans_b: bool,
    g: &[f64],
) -> Result<Vec<(usize, Vec<f64>)>> {
    let (ta, tb) = (val(nodes, a), val(nodes, b));
    let (batch, m, k, n, b_batched, _) = matmul_dims(ta.shape(), tb.shape(), trans_b)?;
    let mut res = Vec::new();
    // logical B is k×n; stored either as k×n or n×k
    let bt_view = if trans_b { (k as isize, 1) } else { (1, n as isize) };
    if wants(a) {
        // dA = G · Bᵀ
        let mut ga = vec![0.0; ta.len()];
        if b_batched {
            for i in 0..batch {
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                    &tb.data()[i * k * n..(i + 1) * k * n],
                    bt_view,
                    &mut ga[i * m * k..(i + 1) * m * k],
                    0.0,
                );
            }
        } else {
            gemm(batch * m, n, k, g, (n as isize, 1), tb.data(), bt_view, &mut ga, 0.0);
        }
        res.push((a.index(), ga));
    }
    if wants(b) {
        // dB = Aᵀ · G, stored in B's layout
        let mut gb = vec![0.0; tb.len()];
        let (rows, cols) = if trans_b { (n, k) } else { (k, n) };
        let per = |i: usize, gb: &mut [f64], ga_rows: usize| {
            let a_off = i * ga_rows * k;
            let g_off = i * ga_rows * n;
            if trans_b {
                // (dB)ᵀ = Gᵀ · A : n×k
                gemm(
                    n,
                    ga_rows,
                    k,
                    &g[g_off..g_off + ga_rows * n],
                    (1, n as isize),
                    &ta.data()[a_off..a_off + ga_rows * k],
                    (k as isize, 1),
                    gb,
                    1.0,
                );
            } else {
                gemm(
                    k,
                    ga_rows,
                    n,
                    &ta.data()[a_off..a_off + ga_rows * k],
                    (1, k as isize),
                    &g[g_off..g_off + ga_rows * n],
                    (n as isize, 1),
                    gb,
                    1.0,
                );
            }
        };
        if b_batched {
            for i in 0..batch {
                per(i, &mut gb[i * rows * cols..(i + 1) * rows * cols], m);
            }
        } else {
            per(0, &mut gb, batch * m);
        }
        res.push((b.index(), gb));
    }
    Ok(res)
}
