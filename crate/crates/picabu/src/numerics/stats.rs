//! Closed-form densities and scores shared across the crate.

use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// KL(N(mu_q, diag var_q) || N(mu_p, diag var_p)), summed over dimensions.
pub fn gaussian_kl(mu_q: &[f64], var_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> Result<f64> {
    let d = mu_q.len();
    if var_q.len() != d || mu_p.len() != d || var_p.len() != d {
        return Err(Error::shape(format!(
            "gaussian_kl expects equal lengths, got {d}/{}/{}/{}",
            var_q.len(),
            mu_p.len(),
            var_p.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..d {
        if var_q[i] <= 0.0 || var_p[i] <= 0.0 {
            return Err(Error::invalid(format!(
                "gaussian_kl requires positive variances, got var_q[{i}]={} var_p[{i}]={}",
                var_q[i], var_p[i]
            )));
        }
        let dm = mu_q[i] - mu_p[i];
        total += 0.5 * (var_q[i] / var_p[i] + dm * dm / var_p[i] - 1.0
            + (var_p[i] / var_q[i]).ln());
    }
    Ok(total)
}

/// Fair (unbiased) ensemble CRPS:
/// mean_i |x_i - obs| - (1 / (2 M (M-1))) sum_ij |x_i - x_j|.
pub fn crps_ensemble(samples: &[f64], obs: f64) -> Result<f64> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::invalid(format!("crps_ensemble needs >= 2 samples, got {m}")));
    }
    let mf = m as f64;
    let term1 = samples.iter().map(|x| (x - obs).abs()).sum::<f64>() / mf;
    let mut pair = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            pair += (samples[i] - samples[j]).abs();
        }
    }
    // sum_ij over ordered pairs is twice the upper triangle.
    Ok(term1 - pair / (mf * (mf - 1.0)))
}

/// Log-density of independent Laplace coordinates, summed.
pub fn laplace_logpdf(x: &[f64], mu: &[f64], scale: &[f64]) -> Result<f64> {
    let d = x.len();
    if mu.len() != d || scale.len() != d {
        return Err(Error::shape(format!(
            "laplace_logpdf expects equal lengths, got {d}/{}/{}",
            mu.len(),
            scale.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..d {
        if scale[i] <= 0.0 {
            return Err(Error::invalid(format!(
                "laplace_logpdf requires positive scale, got scale[{i}]={}",
                scale[i]
            )));
        }
        total += -(2.0 * scale[i]).ln() - (x[i] - mu[i]).abs() / scale[i];
    }
    Ok(total)
}

/// One draw from Beta(alpha, beta).
pub fn beta_sample(alpha: f64, beta: f64, rng: &mut RngStream) -> Result<f64> {
    if alpha <= 0.0 || beta <= 0.0 {
        return Err(Error::invalid(format!(
            "beta_sample requires positive shape parameters, got ({alpha}, {beta})"
        )));
    }
    let dist = Beta::new(alpha, beta)
        .map_err(|e| Error::invalid(format!("beta_sample: {e}")))?;
    Ok(dist.sample(rng))
}
