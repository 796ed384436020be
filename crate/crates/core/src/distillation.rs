//! Global distillation: KL alignment of local and interventional features
//! to features of the frozen global encoder.
//!
//! Features are not distributions, so each feature row is turned into one
//! with a temperature softmax over its dimensions before the divergence is
//! taken. The teacher side never receives a gradient.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::log_softmax_rows;

/// The λ weights swept by the experiment harness.
pub const LAMBDA_SWEEP: [f64; 4] = [0.1, 1.0, 5.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the distillation term in the local objective; 0 disables it.
    pub lambda_gd: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: 1.0,
            lambda_gd: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.lambda_gd >= 0.0 && self.lambda_gd.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} must be finite and non-negative",
                self.lambda_gd
            )));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature {t} must be positive"
        )));
    }
    Ok(())
}

fn per_row_kl(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    temperature: f64,
) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    check_temperature(temperature)?;
    if student.dim() != teacher.dim() {
        return Err(Error::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student.dim(),
            teacher.dim()
        )));
    }
    if student.nrows() == 0 {
        return Err(Error::InvalidArgument("KL of an empty batch".into()));
    }
    let log_p = log_softmax_rows(student.mapv(|v| v / temperature).view());
    let log_q = log_softmax_rows(teacher.mapv(|v| v / temperature).view());
    let kl = (&log_p.mapv(f64::exp) * &(&log_p - &log_q)).sum_axis(Axis(1));
    Ok((kl, log_p, log_q))
}

/// Batch mean of `KL(softmax(student/T) || softmax(teacher/T))`.
pub fn feature_kl(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    temperature: f64,
) -> Result<f64> {
    let (kl, _, _) = per_row_kl(student, teacher, temperature)?;
    Ok(kl.mean().expect("non-empty"))
}

/// [`feature_kl`] and its gradient with respect to the student only.
pub fn feature_kl_grad(
    student: ArrayView2<f64>,
    teacher: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let (kl, log_p, log_q) = per_row_kl(student, teacher, temperature)?;
    let n = student.nrows() as f64;
    let mut grad = &log_p - &log_q;
    for (mut row, &k) in grad.axis_iter_mut(Axis(0)).zip(kl.iter()) {
        row.mapv_inplace(|v| v - k);
    }
    grad *= &log_p.mapv(f64::exp);
    grad.mapv_inplace(|g| g / (n * temperature));
    Ok((kl.mean().expect("non-empty"), grad))
}

/// `KL(f_i || f_g) + KL(f_inv || f_g)`.
pub fn gd_loss(
    f_i: ArrayView2<f64>,
    f_inv: ArrayView2<f64>,
    f_g: ArrayView2<f64>,
    temperature: f64,
) -> Result<f64> {
    Ok(feature_kl(f_i, f_g, temperature)? + feature_kl(f_inv, f_g, temperature)?)
}
