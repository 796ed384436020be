//! Row-wise softmax helpers and the cross-entropy loss.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Numerically stable row-wise log-softmax.
pub fn log_softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    log_softmax_rows(x).mapv(f64::exp)
}

/// Mean cross-entropy of `softmax(logits)` against integer labels, with the
/// gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {n} rows of logits",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cross entropy of an empty batch".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    let log_probs = log_softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = log_probs.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        loss -= log_probs[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    grad.mapv_inplace(|g| g * scale);
    Ok((loss * scale, grad))
}
