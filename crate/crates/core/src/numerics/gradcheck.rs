use crate::error::{Error, Result};

/// Largest relative discrepancy between the analytic gradient and central
/// differences, `|a − n| / max(1e-12, |a| + |n|)`, over all parameters.
///
/// `loss_fn` returns `(loss, analytic_gradient)` for the given parameters.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::Argument("finite-difference step must be positive".into()));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("loss is not finite at the base point".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + epsilon;
        let (plus, _) = loss_fn(&probe)?;
        probe[i] = params[i] - epsilon;
        let (minus, _) = loss_fn(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss while probing parameter {i}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let err = grad_check(|w| Ok((w[0] * w[0], vec![2.0 * w[0]])), &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(|w| Ok((w[0] * w[0], vec![3.0 * w[0]])), &[3.0], 1e-5).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let res = grad_check(|w| Ok((w[0].ln(), vec![1.0 / w[0]])), &[-1.0], 1e-5);
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
