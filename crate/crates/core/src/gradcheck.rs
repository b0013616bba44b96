//! Central finite-difference verification of analytic gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::tensor::Tensor;
use crate::Result;

/// Default perturbation step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares an analytic gradient against central finite differences of a
/// scalar loss. Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
///
/// `loss_fn` must evaluate the loss at an arbitrary nearby parameter value;
/// it is called twice per coordinate.
pub fn grad_check<F>(mut loss_fn: F, theta: &Tensor, analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.len() != theta.len() {
        return Err(CoreError::Shape {
            op: "grad_check",
            detail: format!(
                "gradient has {} entries for {} parameters",
                analytic.len(),
                theta.len()
            ),
        });
    }
    let mut max_err = 0.0_f64;
    let mut data: Vec<f64> = theta.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + step;
        let up = checked_loss(&mut loss_fn, theta.shape(), &data)?;
        data[i] = orig - step;
        let down = checked_loss(&mut loss_fn, theta.shape(), &data)?;
        data[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

fn checked_loss<F>(loss_fn: &mut F, shape: &[usize], data: &[f64]) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let t = Tensor::from_vec(shape.to_vec(), data.to_vec())?;
    let loss = loss_fn(&t)?;
    if !loss.is_finite() {
        return Err(CoreError::NonFinite { op: "grad_check" });
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_gradient_is_exact() {
        let theta = Tensor::from_vec(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let analytic: Vec<f64> = theta.data().iter().map(|v| 2.0 * v).collect();
        let err = grad_check(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &theta,
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let theta = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &theta,
            &[0.0, 0.0],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn non_finite_loss_errors() {
        let theta = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let res = grad_check(|_| Ok(f64::NAN), &theta, &[0.0], DEFAULT_STEP);
        assert!(matches!(res, Err(CoreError::NonFinite { .. })));
    }
}
