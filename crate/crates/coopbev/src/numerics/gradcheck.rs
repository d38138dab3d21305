use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Central-difference gradient check.
///
/// Perturbs every coordinate of `x` by ±eps, evaluates the scalar function,
/// and returns the maximum over coordinates of
/// |analytic − central_difference| / max(1, |analytic|).
pub fn grad_check<F>(mut f: F, x: &Tensor, analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.len() != x.numel() {
        return Err(Error::config(format!(
            "analytic gradient has {} entries for {} coordinates",
            analytic.len(),
            x.numel()
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite function value during grad check at coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
