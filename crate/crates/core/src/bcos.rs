//! The B-cos* unit and its MaxOut-paired layer.
//!
//! A B-cos* unit with raw weight `w` maps an input `x` to
//! `‖x‖·|c|^B·sgn(c)` where `c = cos∠(x, ŵ)` and `ŵ = w/‖w‖`. Its magnitude
//! never exceeds `‖x‖`, with equality only when `x` and `w` are collinear.
//! A [`BcosLayer`] evaluates two units per output feature and keeps the
//! larger signed value.
//!
//! Weights are stored unnormalized; `ŵ` is recomputed at every forward pass
//! so that training differentiates through the normalization.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default B-cos exponent.
pub const DEFAULT_EXPONENT: u32 = 2;

/// Inputs whose norm does not exceed this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `⟨x, ŵ⟩ / ‖x‖`, or 0 when `‖x‖ ≤ eps`. `w_hat` must be unit-norm.
pub fn cosine_similarity(x: &[f64], w_hat: &[f64]) -> Result<f64> {
    if x.len() != w_hat.len() {
        return Err(Error::dim(format!(
            "cosine of vectors of length {} and {}",
            x.len(),
            w_hat.len()
        )));
    }
    let nx = norm(x);
    if nx <= NORM_EPS {
        return Ok(0.0);
    }
    Ok(dot(x, w_hat) / nx)
}

/// B-cos* of a single input against a raw weight vector.
pub fn bcos_star(x: &[f64], w: &[f64], exponent: u32) -> Result<f64> {
    if exponent == 0 {
        return Err(Error::Config("B-cos exponent must be at least 1".into()));
    }
    let nw = norm(w);
    if nw == 0.0 {
        return Err(Error::Validation("B-cos weight has zero norm".into()));
    }
    let w_hat: Vec<f64> = w.iter().map(|v| v / nw).collect();
    let c = cosine_similarity(x, &w_hat)?;
    Ok(norm(x) * c.abs().powi(exponent as i32) * crate::autodiff::sign0(c))
}

/// Records B-cos* of `x[.., in]` against every row of `w[out, in]`.
pub fn bcos_unit_on_tape(tape: &Tape, x: Var, w: Var, exponent: u32) -> Result<Var> {
    let w_norm = tape.l2_norm(w, 1, 0.0)?;
    let w_hat = tape.div(w, w_norm)?;
    let lin = tape.matmul_t(x, w_hat)?;
    let rank = tape.shape(x)?.len();
    let x_norm = tape.l2_norm(x, rank - 1, NORM_EPS)?;
    tape.bcos_gate(lin, x_norm, exponent)
}

/// Records the MaxOut pair: elementwise max of two B-cos* units.
pub fn bcos_layer_on_tape(tape: &Tape, x: Var, w_a: Var, w_b: Var, exponent: u32) -> Result<Var> {
    let a = bcos_unit_on_tape(tape, x, w_a, exponent)?;
    let b = bcos_unit_on_tape(tape, x, w_b, exponent)?;
    tape.maximum(a, b)
}

/// One bias-free B-cos* projection `in → out`.
#[derive(Debug, Clone)]
pub struct BcosUnit {
    weight: Tensor,
    exponent: u32,
}

impl BcosUnit {
    /// Rejects weights containing a zero-norm row.
    pub fn new(weight: Tensor, exponent: u32) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::dim(format!(
                "B-cos weight must be [out, in], got {:?}",
                weight.shape()
            )));
        }
        if exponent == 0 {
            return Err(Error::Config("B-cos exponent must be at least 1".into()));
        }
        let cols = weight.shape()[1];
        if weight.data().chunks(cols).any(|row| norm(row) == 0.0) {
            return Err(Error::Validation("B-cos weight row has zero norm".into()));
        }
        Ok(Self { weight, exponent })
    }

    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, exponent: u32, rng: &mut R) -> Result<Self> {
        Self::new(Tensor::trunc_normal(vec![outputs, inputs], 0.02, rng), exponent)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Per-unit outputs for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.weight
            .data()
            .chunks(self.inputs())
            .map(|w| bcos_star(x, w, self.exponent))
            .collect()
    }

    /// Unit-norm weight rows.
    pub fn normalized(&self) -> Tensor {
        let cols = self.inputs();
        let mut w = self.weight.clone();
        for row in w.data_mut().chunks_mut(cols) {
            let n = norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        w
    }
}

/// MaxOut pair of B-cos* units sharing shape and exponent.
#[derive(Debug, Clone)]
pub struct BcosLayer {
    branch_a: BcosUnit,
    branch_b: BcosUnit,
}

impl BcosLayer {
    pub fn new(branch_a: BcosUnit, branch_b: BcosUnit) -> Result<Self> {
        if branch_a.weight.shape() != branch_b.weight.shape() {
            return Err(Error::dim(format!(
                "B-cos branches of shapes {:?} and {:?}",
                branch_a.weight.shape(),
                branch_b.weight.shape()
            )));
        }
        if branch_a.exponent != branch_b.exponent {
            return Err(Error::Config("B-cos branches must share the exponent".into()));
        }
        Ok(Self { branch_a, branch_b })
    }

    /// Branches drawn independently from a truncated normal.
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, exponent: u32, rng: &mut R) -> Result<Self> {
        let a = BcosUnit::random(inputs, outputs, exponent, rng)?;
        let b = BcosUnit::random(inputs, outputs, exponent, rng)?;
        Self::new(a, b)
    }

    pub fn branches(&self) -> (&BcosUnit, &BcosUnit) {
        (&self.branch_a, &self.branch_b)
    }

    pub fn exponent(&self) -> u32 {
        self.branch_a.exponent
    }

    pub fn inputs(&self) -> usize {
        self.branch_a.inputs()
    }

    pub fn outputs(&self) -> usize {
        self.branch_a.outputs()
    }

    /// Scalar parameter count: both branches, no bias.
    pub fn param_count(&self) -> usize {
        2 * self.inputs() * self.outputs()
    }

    /// Records the layer on `tape` for `x[.., in]`, with the weights as
    /// constant leaves.
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x)?;
        if shape.last() != Some(&self.inputs()) {
            return Err(Error::dim(format!(
                "B-cos layer expects trailing extent {}, got {shape:?}",
                self.inputs()
            )));
        }
        let w_a = tape.constant(self.branch_a.weight.clone());
        let w_b = tape.constant(self.branch_b.weight.clone());
        bcos_layer_on_tape(tape, x, w_a, w_b, self.exponent())
    }

    /// Evaluates the layer on a batch `x[n, in]` without a caller tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = self.forward(&tape, v)?;
        tape.value(out)
    }

    /// The input-dependent weight `W(x)` with `W(x)·x` equal to the layer
    /// output: for each unit, `|c|^(B-1)·ŵ` of the winning branch.
    pub fn dynamic_linear_summary(&self, x: &[f64]) -> Result<Tensor> {
        if x.len() != self.inputs() {
            return Err(Error::dim(format!(
                "input of length {} for layer with {} inputs",
                x.len(),
                self.inputs()
            )));
        }
        let out_a = self.branch_a.forward(x)?;
        let out_b = self.branch_b.forward(x)?;
        let (hat_a, hat_b) = (self.branch_a.normalized(), self.branch_b.normalized());
        let cols = self.inputs();
        let b = self.exponent() as i32;
        let mut rows = Vec::with_capacity(self.outputs() * cols);
        for j in 0..self.outputs() {
            let w_hat = if out_a[j] >= out_b[j] {
                &hat_a.data()[j * cols..(j + 1) * cols]
            } else {
                &hat_b.data()[j * cols..(j + 1) * cols]
            };
            let c = cosine_similarity(x, w_hat)?;
            let scale = c.abs().powi(b - 1);
            rows.extend(w_hat.iter().map(|w| w * scale));
        }
        Tensor::new(vec![self.outputs(), cols], rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(rows: &[Vec<f64>]) -> BcosUnit {
        BcosUnit::new(Tensor::from_rows(rows).unwrap(), 2).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[3.0, 4.0], &[1.0, 0.0]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bcos_star_examples() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v = bcos_star(&[1.0, 1.0], &[h, h], 2).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-12);
        // 5 · 0.6² · (+1)
        assert!((bcos_star(&[3.0, 4.0], &[1.0, 0.0], 2).unwrap() - 1.8).abs() < 1e-12);
        assert!((bcos_star(&[-3.0, 4.0], &[1.0, 0.0], 2).unwrap() + 1.8).abs() < 1e-12);
        // B = 1 is the plain projection onto ŵ
        assert!((bcos_star(&[3.0, 4.0], &[2.0, 0.0], 1).unwrap() - 3.0).abs() < 1e-15);
        assert!(bcos_star(&[1.0, 0.0], &[0.0, 0.0], 2).is_err());
        assert!(bcos_star(&[1.0, 0.0], &[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn zero_norm_weights_rejected_at_construction() {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(BcosUnit::new(w, 2), Err(Error::Validation(_))));
        let a = unit(&[vec![1.0, 0.0]]);
        let b = BcosUnit::new(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), 3).unwrap();
        assert!(BcosLayer::new(a, b).is_err());
    }

    #[test]
    fn layer_forward_examples() {
        let layer = BcosLayer::new(unit(&[vec![1.0, 0.0]]), unit(&[vec![0.0, 1.0]])).unwrap();
        let run = |x: [f64; 2]| layer.apply(&Tensor::from_rows(&[x.to_vec()]).unwrap()).unwrap().item();
        assert!((run([1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((run([0.0, 1.0]) - 1.0).abs() < 1e-15);
        // max(5·0.6², 5·0.8²)
        assert!((run([3.0, 4.0]) - 3.2).abs() < 1e-12);
        let wrong = Tensor::zeros(vec![1, 3]);
        assert!(layer.apply(&wrong).is_err());
    }

    #[test]
    fn dynamic_linear_examples() {
        let layer = BcosLayer::new(unit(&[vec![1.0, 0.0]]), unit(&[vec![-1.0, 0.0]])).unwrap();
        let w = layer.dynamic_linear_summary(&[3.0, 4.0]).unwrap();
        assert!((w.data()[0] - 0.6).abs() < 1e-15 && w.data()[1] == 0.0);
        let applied = w.data()[0] * 3.0 + w.data()[1] * 4.0;
        assert!((applied - 1.8).abs() < 1e-12);

        let plain = BcosLayer::new(
            BcosUnit::new(Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap(), 1).unwrap(),
            BcosUnit::new(Tensor::from_rows(&[vec![0.0, -2.0]]).unwrap(), 1).unwrap(),
        )
        .unwrap();
        let w = plain.dynamic_linear_summary(&[3.0, 4.0]).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0]);

        let ortho = BcosLayer::new(unit(&[vec![1.0, 0.0]]), unit(&[vec![-1.0, 0.0]])).unwrap();
        let w = ortho.dynamic_linear_summary(&[0.0, 2.0]).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = BcosLayer::random(5, 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let r = finite_difference_check(|tape, x| tape.sum(layer.forward(tape, x)?), &x, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    proptest! {
        #[test]
        fn output_bounded_by_input_norm(
            x in proptest::collection::vec(-5.0f64..5.0, 4),
            w in proptest::collection::vec(-5.0f64..5.0, 4),
            b in 1u32..4,
        ) {
            prop_assume!(norm(&w) > 1e-6);
            let y = bcos_star(&x, &w, b).unwrap();
            prop_assert!(y.abs() <= norm(&x) + 1e-10);
        }

        #[test]
        fn positively_homogeneous_and_weight_scale_invariant(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            w in proptest::collection::vec(-5.0f64..5.0, 3),
            alpha in 0.01f64..100.0,
            b in 1u32..4,
        ) {
            prop_assume!(norm(&w) > 1e-6);
            let y = bcos_star(&x, &w, b).unwrap();
            let ax: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            let bw: Vec<f64> = w.iter().map(|v| v * alpha).collect();
            prop_assert!((bcos_star(&ax, &w, b).unwrap() - alpha * y).abs() <= 1e-12 * alpha.max(1.0) * (1.0 + y.abs()));
            prop_assert!((bcos_star(&x, &bw, b).unwrap() - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }

        #[test]
        fn maxout_dominates_each_branch(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = BcosLayer::random(4, 3, 2, &mut rng).unwrap();
            let tape = Tape::new();
            let x = tape.constant(Tensor::randn(vec![2, 4], 1.0, &mut rng));
            let (a, b) = layer.branches();
            let wa = tape.constant(a.weight().clone());
            let wb = tape.constant(b.weight().clone());
            let ya = tape.value(bcos_unit_on_tape(&tape, x, wa, 2).unwrap()).unwrap();
            let yb = tape.value(bcos_unit_on_tape(&tape, x, wb, 2).unwrap()).unwrap();
            let y = tape.value(bcos_layer_on_tape(&tape, x, wa, wb, 2).unwrap()).unwrap();
            for j in 0..6 {
                prop_assert!(y.data()[j] >= ya.data()[j] && y.data()[j] >= yb.data()[j]);
            }
        }
    }
}
