//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a - n| / max(1, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Central-difference gradient of a scalar function at `point`.
pub fn numeric_gradient(f: &mut dyn FnMut(&Tensor) -> Result<f64>, point: &Tensor, eps: f64) -> Result<Tensor> {
    let mut probe = point.clone();
    let mut out = vec![0.0; point.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(point.shape().to_vec(), out)
}

/// Largest [`relative_error`] between `analytic` and the central-difference
/// gradient of `f` at `point`.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    point: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> Result<f64> {
    point.expect_same_shape(analytic)?;
    let numeric = numeric_gradient(f, point, eps)?;
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let e = relative_error(a, n);
        if !e.is_finite() {
            return Err(Error::Numeric(format!("gradient comparison produced {e}")));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}
