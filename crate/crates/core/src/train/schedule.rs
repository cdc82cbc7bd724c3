use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

fn default_divisor() -> f64 {
    10.0
}

/// Restart the cosine cycle at `restart_epoch` with the peak divided by
/// `lr_divisor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmRestart {
    pub restart_epoch: usize,
    #[serde(default = "default_divisor")]
    pub lr_divisor: f64,
}

/// A restart expressed in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Restart {
    pub at_step: usize,
    pub divisor: f64,
}

fn half_cosine(s: usize, len: usize, hi: f64, lo: f64) -> f64 {
    if len == 0 {
        return hi;
    }
    let frac = s.min(len) as f64 / len as f64;
    lo + 0.5 * (hi - lo) * (1.0 + (PI * frac).cos())
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`,
/// optionally restarted once.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64, restart: Option<Restart>) -> f64 {
    match restart {
        Some(r) if r.at_step > 0 && r.at_step < total_steps => {
            if step < r.at_step {
                half_cosine(step, r.at_step, lr_max, lr_min)
            } else {
                half_cosine(step - r.at_step, total_steps - r.at_step, lr_max / r.divisor, lr_min)
            }
        }
        _ => half_cosine(step, total_steps, lr_max, lr_min),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5, None), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5, None) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5, None) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn restart_resets_to_divided_peak() {
        let r = Some(Restart {
            at_step: 30,
            divisor: 10.0,
        });
        assert_eq!(cosine_lr(0, 100, 1.0, 0.0, r), 1.0);
        assert!(cosine_lr(29, 100, 1.0, 0.0, r) < 0.01);
        assert_eq!(cosine_lr(30, 100, 1.0, 0.0, r), 0.1);
        assert!((cosine_lr(65, 100, 1.0, 0.0, r) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 1.0, 0.0, r).abs() < 1e-17);
    }

    proptest! {
        #[test]
        fn bounded_and_monotone_within_segment(total in 1usize..500, hi in 1e-6f64..1.0, lo_frac in 0.0f64..1.0) {
            let lo = hi * lo_frac;
            let mut prev = f64::INFINITY;
            for s in 0..=total {
                let lr = cosine_lr(s, total, hi, lo, None);
                prop_assert!(lr <= hi + 1e-15 && lr >= lo - 1e-15);
                prop_assert!(lr <= prev + 1e-15);
                prev = lr;
            }
        }
    }
}
