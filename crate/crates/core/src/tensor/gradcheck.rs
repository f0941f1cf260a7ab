//! Central-difference gradient oracle used to verify the tape.

use crate::error::{Error, Result};

/// Numeric derivative of one parameter element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NumericGrad {
    Value(f64),
    /// One-sided slopes disagree: the point is a kink and is excluded from checks.
    NonComparable,
}

impl NumericGrad {
    pub fn value(self) -> Option<f64> {
        match self {
            NumericGrad::Value(v) => Some(v),
            NumericGrad::NonComparable => None,
        }
    }
}

/// `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every element `i` of `params`.
pub fn finite_difference_oracle<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<NumericGrad>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::param("step", format!("must be positive, got {step}")));
    }
    let mut theta = params.to_vec();
    let centre = f(&theta);
    if !centre.is_finite() {
        return Err(Error::Numeric("objective is non-finite at the base point".into()));
    }
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = f(&theta);
        theta[i] = orig - step;
        let minus = f(&theta);
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective perturbing parameter {i}")));
        }
        let right = (plus - centre) / step;
        let left = (centre - minus) / step;
        if (right - left).abs() > 1e-2 * (1.0 + right.abs() + left.abs()) {
            out.push(NumericGrad::NonComparable);
        } else {
            out.push(NumericGrad::Value((plus - minus) / (2.0 * step)));
        }
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
