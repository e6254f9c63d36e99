//! Power spectra: one-sided temporal periodograms and radially binned
//! spatial spectra.
//!
//! Normalization conventions, fixed so Parseval-style checks are exact:
//!
//! * temporal: the one-sided periodogram of the mean-removed series sums to
//!   its population variance;
//! * spatial: the radially binned spectrum of the mean-removed H x W field
//!   sums to its total squared deviation (variance times H*W). The DC mode
//!   is excluded, so adding a constant changes nothing.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};

/// A discrete power spectrum.
///
/// `frequencies` are cycles per step for temporal spectra and integer
/// wavenumber-bin indices for spatial spectra; strictly increasing either
/// way. `power` is non-negative, same length.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} contains a non-finite value")));
    }
    Ok(())
}

/// One-sided periodogram of a mean-removed series; length floor(T/2)+1.
pub fn temporal_power_spectrum(series: &[f64]) -> Result<PowerSpectrum> {
    let t = series.len();
    if t < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {t}")));
    }
    check_finite(series, "series")?;

    let mean = series.iter().sum::<f64>() / t as f64;
    let mut buf: Vec<Complex<f64>> =
        series.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(t).process(&mut buf);

    let n_out = t / 2 + 1;
    let norm = 1.0 / (t as f64 * t as f64);
    let mut power = Vec::with_capacity(n_out);
    let mut frequencies = Vec::with_capacity(n_out);
    for k in 0..n_out {
        // Bins paired with a distinct negative frequency count twice.
        let fold = if k == 0 || 2 * k == t { 1.0 } else { 2.0 };
        power.push(fold * buf[k].norm_sqr() * norm);
        frequencies.push(k as f64 / t as f64);
    }
    Ok(PowerSpectrum { frequencies, power })
}

/// Number of radial wavenumber bins for an `h` x `w` grid (bin 0 excluded).
pub fn n_radial_bins(h: usize, w: usize) -> usize {
    let fy = (h / 2) as f64;
    let fx = (w / 2) as f64;
    (fy * fy + fx * fx).sqrt().floor() as usize
}

/// Reusable plan for spatial spectra on a fixed grid: FFT plans, the radial
/// bin map, and scratch. Also exposes the adjoint pass used by the
/// spectral training loss.
pub struct SpatialSpectrumPlan {
    h: usize,
    w: usize,
    n_bins: usize,
    /// Per flattened (ky, kx): radial bin minus one; usize::MAX marks DC.
    bin_of: Vec<usize>,
    fwd_row: Arc<dyn Fft<f64>>,
    fwd_col: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
    col_buf: Vec<Complex<f64>>,
}

impl SpatialSpectrumPlan {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        let mut bin_of = Vec::with_capacity(h * w);
        for ky in 0..h {
            let fy = ky.min(h - ky) as f64;
            for kx in 0..w {
                let fx = kx.min(w - kx) as f64;
                let r = (fy * fy + fx * fx).sqrt();
                if ky == 0 && kx == 0 {
                    bin_of.push(usize::MAX);
                } else {
                    bin_of.push(r.floor() as usize - 1);
                }
            }
        }
        SpatialSpectrumPlan {
            h,
            w,
            n_bins: n_radial_bins(h, w),
            bin_of,
            fwd_row: planner.plan_fft_forward(w),
            fwd_col: planner.plan_fft_forward(h),
            inv_row: planner.plan_fft_inverse(w),
            inv_col: planner.plan_fft_inverse(h),
            col_buf: vec![Complex::new(0.0, 0.0); h],
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn fft2(&mut self, coeffs: &mut [Complex<f64>], inverse: bool) {
        let (row, col) = if inverse {
            (&self.inv_row, &self.inv_col)
        } else {
            (&self.fwd_row, &self.fwd_col)
        };
        for r in coeffs.chunks_exact_mut(self.w) {
            row.process(r);
        }
        for x in 0..self.w {
            for y in 0..self.h {
                self.col_buf[y] = coeffs[y * self.w + x];
            }
            col.process(&mut self.col_buf);
            for y in 0..self.h {
                coeffs[y * self.w + x] = self.col_buf[y];
            }
        }
    }

    /// Mean-removed 2-D transform plus radial binning. `coeffs` receives the
    /// complex transform (needed by [`Self::backward`]); `bins` receives the
    /// binned power, length `n_bins`.
    pub fn forward_into(&mut self, field: &[f64], coeffs: &mut Vec<Complex<f64>>, bins: &mut [f64]) {
        debug_assert_eq!(field.len(), self.h * self.w);
        debug_assert_eq!(bins.len(), self.n_bins);
        let n = (self.h * self.w) as f64;
        let mean = field.iter().sum::<f64>() / n;
        coeffs.clear();
        coeffs.extend(field.iter().map(|&x| Complex::new(x - mean, 0.0)));
        self.fft2(coeffs, false);
        bins.iter_mut().for_each(|b| *b = 0.0);
        let inv_n = 1.0 / n;
        for (c, &b) in coeffs.iter().zip(&self.bin_of) {
            if b != usize::MAX {
                bins[b] += c.norm_sqr() * inv_n;
            }
        }
    }

    /// Binned power of one field.
    pub fn spectrum(&mut self, field: &[f64]) -> Vec<f64> {
        let mut coeffs = Vec::new();
        let mut bins = vec![0.0; self.n_bins];
        self.forward_into(field, &mut coeffs, &mut bins);
        bins
    }

    /// Adjoint of [`Self::forward_into`]: given d(loss)/d(bin power) and the
    /// stored transform, accumulate d(loss)/d(field) into `d_field`.
    pub fn backward(&mut self, coeffs: &[Complex<f64>], d_bins: &[f64], d_field: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.h * self.w);
        debug_assert_eq!(d_bins.len(), self.n_bins);
        let n = (self.h * self.w) as f64;
        let mut weighted: Vec<Complex<f64>> = coeffs
            .iter()
            .zip(&self.bin_of)
            .map(|(c, &b)| if b == usize::MAX { Complex::new(0.0, 0.0) } else { c * d_bins[b] })
            .collect();
        self.fft2(&mut weighted, true);
        // d/dy_n of sum_k s_k |F_k|^2 / n is (2/n) Re(invdft(s .* F))(n);
        // then the mean-removal adjoint subtracts the average gradient.
        let scale = 2.0 / n;
        let mut acc = 0.0;
        for wgt in &weighted {
            acc += wgt.re;
        }
        let correction = scale * acc / n;
        for (d, wgt) in d_field.iter_mut().zip(&weighted) {
            *d += scale * wgt.re - correction;
        }
    }
}

/// 2-D spectrum of a mean-removed field, binned by integer wavenumber.
pub fn spatial_power_spectrum(field: &[f64], h: usize, w: usize) -> Result<PowerSpectrum> {
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("grid must be at least 2x2, got {h}x{w}")));
    }
    if field.len() != h * w {
        return Err(Error::shape(format!(
            "field has {} cells but grid is {h}x{w}",
            field.len()
        )));
    }
    check_finite(field, "field")?;
    let mut plan = SpatialSpectrumPlan::new(h, w);
    let power = plan.spectrum(field);
    let frequencies = (1..=plan.n_bins()).map(|b| b as f64).collect();
    Ok(PowerSpectrum { frequencies, power })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn variance(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    }

    #[test]
    fn constant_series_has_zero_power() {
        let s = vec![3.25; 50];
        let ps = temporal_power_spectrum(&s).unwrap();
        assert_eq!(ps.power.len(), 26);
        assert!(ps.power.iter().all(|&p| p.abs() < 1e-24));
    }

    #[test]
    fn pure_tone_lands_in_its_bin() {
        let t = 64;
        let s: Vec<f64> = (0..t)
            .map(|i| (std::f64::consts::TAU * i as f64 * 8.0 / t as f64).cos())
            .collect();
        let ps = temporal_power_spectrum(&s).unwrap();
        for (k, &p) in ps.power.iter().enumerate() {
            if k == 8 {
                assert!((p - 0.5).abs() < 1e-12, "tone bin power {p}");
            } else {
                assert!(p < 1e-20, "leak at bin {k}: {p}");
            }
        }
    }

    #[test]
    fn temporal_parseval() {
        let mut rng = RngStream::new(11, 0);
        let s: Vec<f64> = (0..501).map(|_| rng.normal()).collect();
        let ps = temporal_power_spectrum(&s).unwrap();
        let total: f64 = ps.power.iter().sum();
        let var = variance(&s);
        assert!((total - var).abs() <= 1e-6 * var, "total {total} var {var}");
    }

    // Flatness of a white-noise periodogram. The max/min bin ratio bound was
    // frozen from a Monte Carlo sweep over 100 seeds at T=4096 (observed max
    // 2.61e6; chi-square(2) tails make small minima common).
    #[test]
    fn white_noise_spectrum_is_flat_within_chi_square_tails() {
        let mut rng = RngStream::new(5, 0);
        let s: Vec<f64> = (0..4096).map(|_| rng.normal()).collect();
        let ps = temporal_power_spectrum(&s).unwrap();
        let interior = &ps.power[1..ps.power.len() - 1];
        let max = interior.iter().cloned().fold(f64::MIN, f64::max);
        let min = interior.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 1.0e7, "ratio {}", max / min);
        // Mean interior bin power tracks the flat level 2*var/T.
        let mean_bin = interior.iter().sum::<f64>() / interior.len() as f64;
        let expect = variance(&s) / 2048.0;
        assert!((mean_bin / expect - 1.0).abs() < 0.15);
    }

    // Monte Carlo oracle that established the ratio bound above; run with
    // `cargo test -- --ignored white_noise_ratio_oracle --nocapture`.
    #[test]
    #[ignore]
    fn white_noise_ratio_oracle() {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut rng = RngStream::new(seed, 0);
            let s: Vec<f64> = (0..4096).map(|_| rng.normal()).collect();
            let ps = temporal_power_spectrum(&s).unwrap();
            let interior = &ps.power[1..ps.power.len() - 1];
            let max = interior.iter().cloned().fold(f64::MIN, f64::max);
            let min = interior.iter().cloned().fold(f64::MAX, f64::min);
            worst = worst.max(max / min);
        }
        println!("worst max/min bin ratio over 100 seeds: {worst:.3e}");
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        assert!(temporal_power_spectrum(&[1.0, f64::NAN, 2.0]).is_err());
        let mut field = vec![0.0; 16];
        field[5] = f64::INFINITY;
        assert!(spatial_power_spectrum(&field, 4, 4).is_err());
    }

    #[test]
    fn constant_field_has_zero_bins() {
        let field = vec![2.0; 32 * 32];
        let ps = spatial_power_spectrum(&field, 32, 32).unwrap();
        assert!(ps.power.iter().all(|&p| p.abs() < 1e-18));
    }

    #[test]
    fn single_mode_lands_in_wavenumber_bin() {
        let (h, w) = (32, 32);
        let mut field = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                field[y * w + x] = (std::f64::consts::TAU * x as f64 * 3.0 / w as f64).sin();
            }
        }
        let ps = spatial_power_spectrum(&field, h, w).unwrap();
        for (i, &p) in ps.power.iter().enumerate() {
            let bin = i + 1;
            if bin == 3 {
                let energy: f64 = field.iter().map(|v| v * v).sum();
                assert!((p - energy).abs() < 1e-9 * energy, "bin 3 power {p} energy {energy}");
            } else {
                assert!(p < 1e-16, "leak in bin {bin}: {p}");
            }
        }
    }

    #[test]
    fn spatial_parseval_energy() {
        let (h, w) = (12, 17);
        let mut rng = RngStream::new(3, 9);
        let field: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        let ps = spatial_power_spectrum(&field, h, w).unwrap();
        let total: f64 = ps.power.iter().sum();
        let energy = variance(&field) * (h * w) as f64;
        assert!(
            (total - energy).abs() <= 1e-6 * energy,
            "total {total} energy {energy}"
        );
    }

    #[test]
    fn spatial_backward_matches_finite_differences() {
        let (h, w) = (6, 5);
        let mut rng = RngStream::new(8, 1);
        let field: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        let target: Vec<f64> = (0..n_radial_bins(h, w)).map(|_| rng.normal().abs()).collect();
        let mut plan = SpatialSpectrumPlan::new(h, w);

        // loss = sum_b |P_b - target_b|
        let loss = |plan: &mut SpatialSpectrumPlan, f: &[f64]| -> f64 {
            plan.spectrum(f)
                .iter()
                .zip(&target)
                .map(|(p, t)| (p - t).abs())
                .sum()
        };

        let mut coeffs = Vec::new();
        let mut bins = vec![0.0; plan.n_bins()];
        plan.forward_into(&field, &mut coeffs, &mut bins);
        let d_bins: Vec<f64> =
            bins.iter().zip(&target).map(|(p, t)| if p >= t { 1.0 } else { -1.0 }).collect();
        let mut grad = vec![0.0; h * w];
        plan.backward(&coeffs, &d_bins, &mut grad);

        let eps = 1e-6;
        for i in (0..h * w).step_by(3) {
            let mut fp = field.clone();
            fp[i] += eps;
            let mut fm = field.clone();
            fm[i] -= eps;
            let fd = (loss(&mut plan, &fp) - loss(&mut plan, &fm)) / (2.0 * eps);
            assert!(
                (fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "cell {i}: fd {fd} analytic {}",
                grad[i]
            );
        }
    }
}
