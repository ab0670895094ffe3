use super::matrix::Matrix;
use crate::error::{shape_err, Error, Result};

/// Numerically stable `log Σ exp(row)`.
pub fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = logsumexp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    out
}

/// Summed cross-entropy over rows and its gradient with respect to the logits.
pub fn softmax_cross_entropy_sum(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() == 0 {
        return Err(Error::Argument("cross-entropy of an empty batch".into()));
    }
    if labels.len() != logits.rows() {
        return shape_err(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        ));
    }
    let k = logits.cols();
    let mut grad = Matrix::zeros(logits.rows(), k);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Argument(format!("label {y} out of range for {k} classes")));
        }
        let row = logits.row(r);
        let lse = logsumexp(row);
        loss += lse - row[y];
        let g = grad.row_mut(r);
        for (gv, v) in g.iter_mut().zip(row) {
            *gv = (v - lse).exp();
        }
        g[y] -= 1.0;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite cross-entropy".into()));
    }
    Ok((loss, grad))
}

/// Mean cross-entropy over rows, `mean(−logit[y] + logsumexp(row))`, with its gradient.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (sum, mut grad) = softmax_cross_entropy_sum(logits, labels)?;
    let n = logits.rows() as f64;
    grad.scale(1.0 / n);
    Ok((sum / n, grad))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a {0,1} target, with d/dlogit.
pub fn bce_with_logit(logit: f64, target: bool) -> (f64, f64) {
    // log(1 + e^{-|x|}) + max(x, 0) − x·y
    let y = if target { 1.0 } else { 0.0 };
    let loss = (-logit.abs()).exp().ln_1p() + logit.max(0.0) - logit * y;
    (loss, sigmoid(logit) - y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Matrix::zeros(1, 3);
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_prediction_has_no_loss() {
        let logits = Matrix::from_rows(&[[100.0, 0.0]]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-40);
    }

    #[test]
    fn two_row_batch_matches_direct_evaluation() {
        // Direct scalar evaluation of the formula, written independently of the
        // logsumexp path: row0 = −2 + ln(e¹ + e²), row1 = −3 + ln(e³ + e⁰).
        let row0 = -2.0 + (1f64.exp() + 2f64.exp()).ln();
        let row1 = -3.0 + (3f64.exp() + 1.0).ln();
        let expected = 0.5 * (row0 + row1);
        // Frozen from a 50-digit evaluation: 0.5*(ln(1+e^-1) + ln(1+e^-3))
        assert!((expected - 0.180_924_519_545_982_45).abs() < 1e-15);
        let logits = Matrix::from_rows(&[[1.0, 2.0], [3.0, 0.0]]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1, 0]).unwrap();
        assert!((loss - expected).abs() < 1e-15);
        let p0 = 1f64.exp() / (1f64.exp() + 2f64.exp());
        assert!((grad.get(0, 0) - 0.5 * p0).abs() < 1e-15);
        assert!((grad.get(0, 1) - 0.5 * (1.0 - p0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_and_bad_label_are_argument_errors() {
        assert!(matches!(
            softmax_cross_entropy(&Matrix::zeros(0, 3), &[]),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            softmax_cross_entropy(&Matrix::zeros(1, 3), &[3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn bce_matches_naive_formula() {
        for &(x, t) in &[(0.3, true), (-1.7, false), (2.5, false), (-0.2, true)] {
            let p = 1.0 / (1.0 + (-x as f64).exp());
            let naive = if t { -p.ln() } else { -(1.0 - p).ln() };
            let (loss, g) = bce_with_logit(x, t);
            assert!((loss - naive).abs() < 1e-14);
            assert!((g - (p - if t { 1.0 } else { 0.0 })).abs() < 1e-15);
        }
    }
}
