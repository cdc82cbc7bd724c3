use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing autodiff against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max_i |g_i − n_i| / max(1, |g_i|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks the gradient of a scalar-valued `f` at `x` coordinate by
/// coordinate with step `h`.
///
/// `f` receives a fresh tape and the input handle and returns the scalar
/// output handle.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(point);
        let out = f(&tape, v)?;
        let value = tape.value(out)?;
        if value.len() != 1 {
            return Err(Error::dim("gradient check needs a scalar function"));
        }
        Ok(value.item())
    };

    let tape = Tape::new();
    let v = tape.leaf(x.clone().with_requires_grad());
    let out = f(&tape, v)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(v)?
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(g, n)| (g - n).abs() / g.abs().max(1.0))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
