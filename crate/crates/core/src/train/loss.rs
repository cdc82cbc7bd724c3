use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Classification objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Categorical cross-entropy over the softmax.
    #[default]
    Cce,
    /// Per-logit sigmoid cross-entropy against one-hot targets.
    Bce,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::Cce => "cce",
            Loss::Bce => "bce",
        }
    }

    pub fn on_tape(self, tape: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        match self {
            Loss::Cce => tape.cross_entropy(logits, labels),
            Loss::Bce => tape.bce_one_hot(logits, labels),
        }
    }

    /// Value of the loss on detached `[batch, K]` logits.
    pub fn evaluate(self, logits: &Tensor, labels: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let z = tape.constant(logits.clone());
        let l = self.on_tape(&tape, z, labels)?;
        Ok(tape.value(l)?.item())
    }
}

/// Mean of `-log softmax(z)[y]` over the batch.
pub fn cce_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Loss::Cce.evaluate(logits, labels)
}

/// Mean over batch and classes of the sigmoid cross-entropy with one-hot
/// targets.
pub fn bce_onehot_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Loss::Bce.evaluate(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_closed_forms() {
        for k in 2..7 {
            let z = Tensor::full(vec![3, k], 0.7);
            assert!((cce_loss(&z, &[0, 1, k - 1]).unwrap() - (k as f64).ln()).abs() < 1e-12);
            let zero = Tensor::zeros(vec![3, k]);
            assert!((bce_onehot_loss(&zero, &[0, 1, k - 1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        }
        assert!((cce_loss(&Tensor::zeros(vec![1, 4]), &[2]).unwrap() - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn scalar_examples() {
        let v = cce_loss(&t(&[1, 2], &[2.0, 0.0]), &[0]).unwrap();
        assert!((v - (-(2f64.exp() / (2f64.exp() + 1.0)).ln())).abs() < 1e-14);
        assert!((v - 0.12693).abs() < 1e-5);
        let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
        let b = bce_onehot_loss(&t(&[1, 2], &[1.0, -1.0]), &[0]).unwrap();
        let oracle = 0.5 * (-(sigma(1.0).ln()) - (1.0 - sigma(-1.0)).ln());
        assert!((b - oracle).abs() < 1e-14);
        assert!((b - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn confident_correct_limit() {
        let z = t(&[2, 3], &[60.0, -60.0, -60.0, -60.0, -60.0, 60.0]);
        assert!(cce_loss(&z, &[0, 2]).unwrap() < 1e-20);
        assert!(bce_onehot_loss(&z, &[0, 2]).unwrap() < 1e-20);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let z = Tensor::zeros(vec![1, 3]);
        assert!(cce_loss(&z, &[3]).is_err());
        assert!(bce_onehot_loss(&z, &[3]).is_err());
        assert!(cce_loss(&z, &[0, 1]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(vec![4, 5], 2.0, &mut rng);
        for loss in [Loss::Cce, Loss::Bce] {
            let check = finite_difference_check(|tape, x| loss.on_tape(tape, x, &[0, 4, 2, 2]), &z, 1e-5).unwrap();
            assert!(check.max_rel_error < 1e-4, "{loss:?}: {}", check.max_rel_error);
        }
    }
}
