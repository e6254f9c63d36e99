//! Central-difference gradient oracle.

use crate::error::{Error, Result};

/// Default step for unit-scaled parameters.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per
/// coordinate. The step is scaled by max(1, |x_i|) per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps <= 0.0 {
        return Err(Error::invalid(format!("finite_diff_grad needs eps > 0, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let step = eps * x[i].abs().max(1.0);
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::invalid(format!(
                "finite_diff_grad: non-finite objective at coordinate {i} (f+={fp}, f-={fm})"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Relative l2 error between two gradient vectors.
pub fn grad_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut diff2 = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in analytic.iter().zip(numeric) {
        diff2 += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    diff2.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}
