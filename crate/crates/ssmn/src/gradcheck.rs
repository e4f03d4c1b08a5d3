//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, SsmnError};

/// Max over checked coordinates of
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
/// with numeric the central difference (f(x+h) - f(x-h)) / 2h.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    point: &[f64],
    h: f64,
) -> Result<f64> {
    let indices: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_sampled(f, analytic, point, h, &indices)
}

/// Same check restricted to a subset of coordinates; large parameter groups
/// are spot-checked rather than swept exhaustively.
pub fn finite_diff_check_sampled(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    point: &[f64],
    h: f64,
    indices: &[usize],
) -> Result<f64> {
    if h <= 0.0 {
        return Err(SsmnError::Invalid("finite_diff_check wants h > 0".into()));
    }
    if analytic.len() != point.len() {
        return Err(SsmnError::Shape(format!(
            "gradient length {} vs point length {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SsmnError::NonFinite(format!(
                "finite_diff_check: non-finite function value at coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (1e-8f64).max(analytic[i].abs() + numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
