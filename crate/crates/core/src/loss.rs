//! Scalar losses over a batch, each returning `(value, gradient w.r.t. prediction)`.

use crate::error::{Error, Result};
use crate::nn::{log_softmax_rows, softmax_rows};
use crate::tensor::Matrix;

/// `(1/N) Σ_i ‖pred_i − target_i‖²`: squared distance averaged over samples,
/// not over coordinates.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    pred.check_same_shape(target, "mse_loss")?;
    let n = pred.rows() as f64;
    let mut grad = pred.sub(target)?;
    let value = grad.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    grad.scale(2.0 / n);
    Ok((value, grad))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::dim(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("label {bad} with {classes} classes")));
    }
    let n = logits.rows() as f64;
    let logp = log_softmax_rows(logits, 1.0);
    let mut grad = softmax_rows(logits, 1.0);
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        value -= logp.get(i, y);
        let g = grad.row_mut(i);
        g[y] -= 1.0;
    }
    grad.scale(1.0 / n);
    Ok((value / n, grad))
}

/// Cross-entropy between the temperature-softened teacher distribution
/// (a constant target) and the temperature-softened student distribution,
/// averaged over rows. The gradient is w.r.t. the student logits.
pub fn distill_ce(teacher: &Matrix, student: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!("temperature must be positive, got {temperature}")));
    }
    teacher.check_same_shape(student, "distill_ce")?;
    let n = student.rows() as f64;
    let target = softmax_rows(teacher, temperature);
    let logq = log_softmax_rows(student, temperature);
    let value = -target
        .as_slice()
        .iter()
        .zip(logq.as_slice())
        .map(|(p, lq)| p * lq)
        .sum::<f64>()
        / n;
    // d/dz of −Σ p log softmax(z/T) is (q − p)/T.
    let mut grad = softmax_rows(student, temperature).sub(&target)?;
    grad.scale(1.0 / (temperature * n));
    Ok((value, grad))
}
