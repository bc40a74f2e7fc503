//! Central-difference verification of tape gradients (64-bit only).

use thiserror::Error;

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value encountered at coordinate {index}")]
    NonFinite { index: usize },
    /// One-sided slopes disagree: the function has a kink at this coordinate.
    #[error("function is not differentiable at coordinate {index} (slopes {left} / {right})")]
    NonDifferentiable { index: usize, left: f64, right: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `step` at every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let eval = |point: Tensor<f64>| -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let y = f(&mut tape, v)?;
        let out = tape.value(y);
        if out.numel() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()).into());
        }
        Ok(out.data()[0])
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    let f0 = tape.value(y).item().ok_or_else(|| TensorError::NonScalarLoss(tape.shape(y).to_vec()))?;
    if !f0.is_finite() {
        return Err(GradCheckError::NonFinite { index: 0 });
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: x.numel(),
    };
    for i in 0..x.numel() {
        let shifted = |delta: f64| {
            let mut d = x.data().to_vec();
            d[i] += delta;
            Tensor::new(x.shape(), d).expect("same shape")
        };
        let fp = eval(shifted(step))?;
        let fm = eval(shifted(-step))?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GradCheckError::NonFinite { index: i });
        }
        let right = (fp - f0) / step;
        let left = (f0 - fm) / step;
        let scale = 1.0f64.max(right.abs()).max(left.abs());
        if (right - left).abs() > 1e-2 * scale {
            return Err(GradCheckError::NonDifferentiable { index: i, left, right });
        }
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        if !a.is_finite() {
            return Err(GradCheckError::NonFinite { index: i });
        }
        let err = (a - numeric).abs() / 1.0f64.max(a.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
