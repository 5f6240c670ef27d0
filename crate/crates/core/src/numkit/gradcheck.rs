use super::Matrix;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Compares an analytic gradient against central finite differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn check_gradient<F>(mut f: F, param: &Matrix, analytic_grad: &Matrix) -> Result<f64>
where
    F: FnMut(&Matrix) -> f64,
{
    if param.shape() != analytic_grad.shape() {
        return Err(Error::shape(
            "check_gradient",
            format!(
                "param {:?} vs gradient {:?}",
                param.shape(),
                analytic_grad.shape()
            ),
        ));
    }
    let mut probe = param.clone();
    let mut worst = 0.0_f64;
    for i in 0..param.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + FD_STEP;
        let plus = f(&probe);
        probe.as_mut_slice()[i] = orig - FD_STEP;
        let minus = f(&probe);
        probe.as_mut_slice()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is non-finite around entry {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = (analytic_grad.as_slice()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
