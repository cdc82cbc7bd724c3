//! ε-rule relevance propagation over a recorded tape.
//!
//! Relevance flows backwards like a gradient, but each operation
//! redistributes it in proportion to the contributions that formed its
//! output:
//!
//! * sums and products with weights use the ε-rule
//!   `R_in = x ⊙ Wᵀ(R_out / (z + ε·sgn z))`;
//! * gates (ReLU, MaxOut, the B-cos `|c|^(B-1)` factor, constant scales)
//!   pass relevance to the gated value unchanged;
//! * index operations (reshape, permute, slice, concat, gather) route it;
//! * softmax outputs are constant mixing weights and receive nothing.
//!
//! Because the B-cos gate passes relevance straight to its projection
//! `⟨ŵ, x⟩`, propagation through a B-cos unit is exactly the ε-rule applied
//! to the dynamic-linear weight `|c|^(B-1)·ŵ`.
//!
//! Relevance reaching a non-input leaf (bias, class token, positional
//! embedding, norm shift) is absorbed and reported separately.

use super::backward::{local_backward, matmul_backward};
use super::ops::{axis_split, Op};
use super::{Node, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{BroadcastIndex, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct RelevanceOptions {
    /// Stabilizer added to every denominator with the sign of `z`.
    pub eps: f64,
}

impl Default for RelevanceOptions {
    fn default() -> Self {
        Self { eps: 1e-6 }
    }
}

/// Relevance of every recorded value after one propagation.
#[derive(Debug)]
pub struct Relevance {
    values: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    /// Total relevance arriving at input leaves.
    pub input_total: f64,
    /// Total relevance absorbed by parameter leaves and terminal operations.
    pub absorbed_total: f64,
}

impl Relevance {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.values
            .get(v.index())
            .and_then(|r| r.as_ref())
            .map(|r| Tensor::from_parts(self.shapes[v.index()].clone(), r.clone()))
    }

    /// Input plus absorbed relevance.
    pub fn total(&self) -> f64 {
        self.input_total + self.absorbed_total
    }
}

impl Tape {
    /// Propagates `seed` (shaped like `root`) back to the leaves.
    pub fn relevance(&self, root: Var, seed: Vec<f64>, opts: RelevanceOptions) -> Result<Relevance> {
        self.check(root)?;
        let nodes = self.nodes();
        if seed.len() != nodes[root.index()].value.len() {
            return Err(Error::dim("relevance seed does not match root shape"));
        }
        let mut rel: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        rel[root.index()] = Some(seed);
        let mut input_total = 0.0;
        let mut absorbed_total = 0.0;
        for id in (0..=root.index()).rev() {
            let Some(r) = rel[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                let s: f64 = r.iter().sum();
                if node.signal {
                    input_total += s;
                } else {
                    absorbed_total += s;
                }
                rel[id] = Some(r);
                continue;
            }
            let (parts, absorbed) = redistribute(&nodes, node, &r, opts.eps)?;
            absorbed_total += absorbed;
            for (input, contribution) in parts {
                match &mut rel[input] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
            rel[id] = Some(r);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Relevance {
            values: rel,
            shapes,
            input_total,
            absorbed_total,
        })
    }
}

fn stabilize(z: f64, r: f64, eps: f64) -> Result<f64> {
    if r == 0.0 {
        return Ok(0.0);
    }
    let denom = z + if z >= 0.0 { eps } else { -eps };
    if denom == 0.0 {
        return Err(Error::Numerical(
            "zero denominator in relevance propagation (use eps > 0)".into(),
        ));
    }
    Ok(r / denom)
}

fn ratios(z: &[f64], r: &[f64], eps: f64) -> Result<Vec<f64>> {
    z.iter().zip(r).map(|(&z, &r)| stabilize(z, r, eps)).collect()
}

type Parts = Vec<(usize, Vec<f64>)>;

fn redistribute(nodes: &[Node], node: &Node, r: &[f64], eps: f64) -> Result<(Parts, f64)> {
    let all = |_: Var| true;
    let val = |v: Var| &nodes[v.index()].value;
    let sig = |v: Var| nodes[v.index()].signal;
    let nonzero = r.iter().any(|&v| v != 0.0);
    let z = node.value.data();
    let total: f64 = r.iter().sum();
    let parts = match &node.op {
        Op::Leaf => unreachable!("leaves handled by caller"),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let s = ratios(z, r, eps)?;
            let (ta, tb) = (val(*a), val(*b));
            let bi = BroadcastIndex::new(ta.shape(), tb.shape())?;
            let mut ra = vec![0.0; ta.len()];
            let mut rb = vec![0.0; tb.len()];
            bi.for_each(|o, ia, ib| {
                ra[ia] += ta.data()[ia] * s[o];
                rb[ib] += sign_b * tb.data()[ib] * s[o];
            });
            vec![(a.index(), ra), (b.index(), rb)]
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (signal_a, signal_b) = (sig(*a), sig(*b));
            let target = match (signal_a, signal_b) {
                (true, false) => *a,
                (false, true) if !is_div => *b,
                (false, false) => return Ok((vec![], total)),
                _ if !nonzero => return Ok((vec![], 0.0)),
                _ => {
                    return Err(Error::Autodiff(format!(
                        "relevance through {:?} of two input-dependent values is undefined",
                        node.op.kind()
                    )))
                }
            };
            vec![(target.index(), route_to_operand(nodes, node, target, r)?)]
        }
        Op::Maximum(..)
        | Op::Neg(_)
        | Op::Relu(_)
        | Op::Scale(..)
        | Op::Reshape(_)
        | Op::Permute { .. }
        | Op::Concat { .. }
        | Op::Slice { .. }
        | Op::Gather { .. }
        | Op::BroadcastTo(_) => {
            let mut parts = local_backward(nodes, node, r, &all)?;
            if matches!(node.op, Op::Neg(_) | Op::Relu(_) | Op::Scale(..)) {
                // gates: pass relevance unchanged rather than scaled by the
                // local derivative
                parts[0].1 = r.to_vec();
            }
            parts
        }
        Op::AddScalar(x, c) => {
            let s = ratios(z, r, eps)?;
            let rx: Vec<f64> = val(*x).data().iter().zip(&s).map(|(v, s)| v * s).collect();
            let constant_share: f64 = s.iter().map(|s| c * s).sum();
            return Ok((vec![(x.index(), rx)], constant_share));
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let t = val(*x);
            let s = ratios(z, r, eps)?;
            let mean = matches!(node.op, Op::Mean { .. });
            let (outer, len, inner) = match axis {
                None => (1, t.len(), 1),
                Some(ax) => axis_split(t.shape(), *ax),
            };
            let w = if mean { 1.0 / len as f64 } else { 1.0 };
            let mut rx = vec![0.0; t.len()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        let at = (o * len + j) * inner + i;
                        rx[at] = t.data()[at] * w * s[o * inner + i];
                    }
                }
            }
            vec![(x.index(), rx)]
        }
        Op::MatMul { a, b, trans_b } => {
            let (signal_a, signal_b) = (sig(*a), sig(*b));
            let target = match (signal_a, signal_b) {
                (true, false) => *a,
                (false, true) => *b,
                (false, false) => return Ok((vec![], total)),
                (true, true) if !nonzero => return Ok((vec![], 0.0)),
                (true, true) => {
                    return Err(Error::Autodiff(
                        "relevance through a product of two input-dependent matrices is undefined".into(),
                    ))
                }
            };
            let s = ratios(z, r, eps)?;
            let only = |v: Var| v == target;
            let mut parts = matmul_backward(nodes, &only, *a, *b, *trans_b, &s)?;
            let (id, c) = parts.pop().expect("one operand requested");
            let x = val(target).data();
            vec![(id, c.iter().zip(x).map(|(c, x)| c * x).collect())]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            inv_std,
            ..
        } => {
            let d = *node.value.shape().last().expect("rank >= 1");
            let s = ratios(z, r, eps)?;
            let xs = val(*x).data();
            let g = gamma.map(|v| val(v).data());
            let mut rx = vec![0.0; xs.len()];
            let mut rbeta = vec![0.0; d];
            for row in 0..inv_std.len() {
                let range = row * d..(row + 1) * d;
                let gs: Vec<f64> = s[range.clone()]
                    .iter()
                    .enumerate()
                    .map(|(j, s)| s * g.map_or(1.0, |g| g[j]))
                    .collect();
                let mean_gs = gs.iter().sum::<f64>() / d as f64;
                for j in 0..d {
                    rx[row * d + j] = xs[row * d + j] * (gs[j] - mean_gs) * inv_std[row];
                }
                if let Some(bv) = beta {
                    let bd = val(*bv).data();
                    for j in 0..d {
                        rbeta[j] += bd[j] * s[row * d + j];
                    }
                }
            }
            let mut parts = vec![(x.index(), rx)];
            if let Some(bv) = beta {
                parts.push((bv.index(), rbeta));
            }
            parts
        }
        Op::BcosGate { lin, .. } => vec![(lin.index(), r.to_vec())],
        Op::Softmax { .. } | Op::L2Norm { .. } => return Ok((vec![], total)),
        Op::Abs(_)
        | Op::Sign(_)
        | Op::Pow(..)
        | Op::Exp(_)
        | Op::Log(_)
        | Op::CrossEntropy { .. }
        | Op::BceOneHot { .. } => {
            if nonzero {
                return Err(Error::Autodiff(format!("no relevance rule for {:?}", node.op.kind())));
            }
            vec![]
        }
    };
    Ok((parts, 0.0))
}

/// Passes relevance of a broadcasting product to one operand, summing over
/// the axes that operand was broadcast along.
fn route_to_operand(nodes: &[Node], node: &Node, target: Var, r: &[f64]) -> Result<Vec<f64>> {
    let t = &nodes[target.index()].value;
    let bi = BroadcastIndex::new(t.shape(), node.value.shape())?;
    let mut out = vec![0.0; t.len()];
    bi.for_each(|o, it, _| out[it] += r[o]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcos::bcos_layer_on_tape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn linear_relevance(x: &[f64], w: Tensor, seed: Vec<f64>, eps: f64) -> Result<(Vec<f64>, Relevance)> {
        let tape = Tape::new();
        let xv = tape.input(t(&[1, x.len()], x));
        let y = tape.matmul_t(xv, tape.constant(w))?;
        let rel = tape.relevance(y, seed, RelevanceOptions { eps })?;
        Ok((rel.get(xv).unwrap().into_data(), rel))
    }

    #[test]
    fn identity_layer_conserves() {
        let (r, rel) = linear_relevance(&[2.0, 3.0], Tensor::eye(2), vec![2.0, 3.0], 1e-6).unwrap();
        assert!((r.iter().sum::<f64>() - 5.0).abs() < 1e-5);
        assert!((rel.input_total - 5.0).abs() < 1e-5);
    }

    #[test]
    fn proportional_split() {
        let (r, _) = linear_relevance(&[1.0, 3.0], t(&[1, 2], &[1.0, 1.0]), vec![4.0], 0.0).unwrap();
        assert_eq!(r, vec![1.0, 3.0]);
    }

    #[test]
    fn zero_denominator_without_eps_is_an_error() {
        let w = t(&[1, 2], &[1.0, 1.0]);
        assert!(matches!(
            linear_relevance(&[0.0, 0.0], w.clone(), vec![1.0], 0.0),
            Err(Error::Numerical(_))
        ));
        let (r, _) = linear_relevance(&[0.0, 0.0], w, vec![1.0], 1e-6).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn bias_relevance_is_absorbed() {
        let tape = Tape::new();
        let x = tape.input(t(&[1, 2], &[1.0, 1.0]));
        let y = tape
            .add(
                tape.matmul_t(x, tape.constant(Tensor::eye(2))).unwrap(),
                tape.leaf(t(&[2], &[1.0, 3.0])),
            )
            .unwrap();
        let rel = tape
            .relevance(y, vec![2.0, 4.0], RelevanceOptions { eps: 0.0 })
            .unwrap();
        assert_eq!(rel.input_total, 2.0);
        assert_eq!(rel.absorbed_total, 4.0);
    }

    #[test]
    fn layer_norm_rule_conserves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.input(Tensor::randn(vec![3, 5], 1.0, &mut rng));
        let g = tape.leaf(Tensor::uniform(vec![5], 0.5, 1.5, &mut rng));
        let y = tape.layer_norm(x, Some(g), None, 1e-12).unwrap();
        let out = tape.value(y).unwrap().into_data();
        let total: f64 = out.iter().sum();
        let rel = tape.relevance(y, out, RelevanceOptions { eps: 0.0 }).unwrap();
        assert!((rel.input_total - total).abs() < 1e-9);
    }

    #[test]
    fn product_of_two_signals_is_rejected() {
        let tape = Tape::new();
        let x = tape.input(t(&[1, 2], &[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        assert!(tape.relevance(y, vec![1.0, 1.0], RelevanceOptions::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bcos_layer_conserves_per_unit(seed in any::<u64>(), inputs in 2usize..8, outputs in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = Tensor::randn(vec![1, inputs], 1.0, &mut rng);
            let wa = Tensor::randn(vec![outputs, inputs], 1.0, &mut rng);
            let wb = Tensor::randn(vec![outputs, inputs], 1.0, &mut rng);
            let layer = crate::bcos::BcosLayer::new(
                crate::bcos::BcosUnit::new(wa.clone(), 2).unwrap(),
                crate::bcos::BcosUnit::new(wb.clone(), 2).unwrap(),
            ).unwrap();
            let dynamic = layer.dynamic_linear_summary(xs.data()).unwrap();
            for j in 0..outputs {
                let tape = Tape::new();
                let x = tape.input(xs.clone());
                let y = bcos_layer_on_tape(&tape, x, tape.leaf(wa.clone()), tape.leaf(wb.clone()), 2).unwrap();
                let out = tape.value(y).unwrap().into_data();
                let mut seed_j = vec![0.0; outputs];
                seed_j[j] = out[j];
                let rel = tape.relevance(y, seed_j, RelevanceOptions::default()).unwrap();
                prop_assert!((rel.input_total - out[j]).abs() < 1e-6);
                prop_assert!(rel.absorbed_total.abs() < 1e-12);
                let exact = tape.relevance(y, {
                    let mut v = vec![0.0; outputs];
                    v[j] = out[j];
                    v
                }, RelevanceOptions { eps: 0.0 });
                let Ok(exact) = exact else { continue };
                let r = exact.get(x).unwrap().into_data();
                let row = &dynamic.data()[j * inputs..(j + 1) * inputs];
                let z: f64 = row.iter().zip(xs.data()).map(|(w, v)| w * v).sum();
                for i in 0..inputs {
                    let expect = xs.data()[i] * row[i] * out[j] / z;
                    prop_assert!((r[i] - expect).abs() < 1e-8 * (1.0 + expect.abs()));
                }
            }
        }
    }
}
