//! The spatiotemporal dataset container shared across the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-cell (optionally per-calendar-phase) standardization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Preprocessing {
    /// Raw data, no transform applied.
    Identity,
    /// Per-cell standardization: x' = (x - mean) / std.
    Normalize { means: Vec<f64>, stds: Vec<f64> },
    /// Per-cell, per-phase standardization with `period` phases
    /// (phase = t mod period). Constants are stored phase-major:
    /// index = phase * d_x + cell.
    Deseasonalize { period: usize, means: Vec<f64>, stds: Vec<f64> },
}

/// Which preprocessing to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    Normalize,
    DeseasonalizeNormalize,
}

/// A T x d_x spatiotemporal array with grid geometry, channel names, and the
/// preprocessing record needed to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major values, length `t * d_x`.
    pub data: Vec<f64>,
    pub t: usize,
    /// Grid geometry (rows, columns); each channel occupies one h*w block.
    pub grid: (usize, usize),
    pub channels: Vec<String>,
    pub preprocessing: Preprocessing,
}

impl Dataset {
    pub fn new(data: Vec<f64>, t: usize, grid: (usize, usize), channels: Vec<String>) -> Result<Self> {
        let d_x = grid.0 * grid.1 * channels.len();
        if data.len() != t * d_x {
            return Err(Error::shape(format!(
                "data has {} values, expected {t} x {d_x}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values".to_string()));
        }
        Ok(Dataset { data, t, grid, channels, preprocessing: Preprocessing::Identity })
    }

    pub fn d_x(&self) -> usize {
        self.grid.0 * self.grid.1 * self.channels.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.d_x();
        &self.data[t * d..(t + 1) * d]
    }

    /// Number of length-(window) contiguous windows.
    pub fn n_windows(&self, window: usize) -> usize {
        self.t.saturating_sub(window - 1)
    }
}

fn standardize(
    values: &mut [f64],
    t: usize,
    d_x: usize,
    period: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut means = vec![0.0; period * d_x];
    let mut stds = vec![0.0; period * d_x];
    let mut counts = vec![0usize; period];
    for step in 0..t {
        counts[step % period] += 1;
    }
    for (p, &c) in counts.iter().enumerate() {
        if c < 2 {
            return Err(Error::invalid(format!(
                "phase {p} has {c} samples; need at least 2 per phase"
            )));
        }
    }
    for step in 0..t {
        let phase = step % period;
        let row = &values[step * d_x..(step + 1) * d_x];
        for (cell, &v) in row.iter().enumerate() {
            means[phase * d_x + cell] += v;
        }
    }
    for phase in 0..period {
        let n = counts[phase] as f64;
        for cell in 0..d_x {
            means[phase * d_x + cell] /= n;
        }
    }
    for step in 0..t {
        let phase = step % period;
        let row = &values[step * d_x..(step + 1) * d_x];
        for (cell, &v) in row.iter().enumerate() {
            let d = v - means[phase * d_x + cell];
            stds[phase * d_x + cell] += d * d;
        }
    }
    for phase in 0..period {
        let n = counts[phase] as f64;
        for cell in 0..d_x {
            let idx = phase * d_x + cell;
            let sd = (stds[idx] / n).sqrt();
            if sd <= 0.0 {
                return Err(Error::invalid(format!(
                    "cell {cell} (phase {phase}) has zero standard deviation; cannot standardize"
                )));
            }
            stds[idx] = sd;
        }
    }
    for step in 0..t {
        let phase = step % period;
        let row = &mut values[step * d_x..(step + 1) * d_x];
        for (cell, v) in row.iter_mut().enumerate() {
            let idx = phase * d_x + cell;
            *v = (*v - means[idx]) / stds[idx];
        }
    }
    Ok((means, stds))
}

/// Fit and apply per-cell standardization; `period` is used only in
/// seasonal mode. Constants are stored on the result for inversion.
pub fn preprocess(dataset: &Dataset, mode: PreprocessMode, period: usize) -> Result<Dataset> {
    if !matches!(dataset.preprocessing, Preprocessing::Identity) {
        return Err(Error::invalid("dataset is already preprocessed".to_string()));
    }
    let d_x = dataset.d_x();
    let mut out = dataset.clone();
    match mode {
        PreprocessMode::Normalize => {
            let (means, stds) = standardize(&mut out.data, out.t, d_x, 1)?;
            out.preprocessing = Preprocessing::Normalize { means, stds };
        }
        PreprocessMode::DeseasonalizeNormalize => {
            if period < 2 {
                return Err(Error::invalid(format!("seasonal period must be >= 2, got {period}")));
            }
            if dataset.t < 2 * period {
                return Err(Error::invalid(format!(
                    "need T >= 2*period for seasonal mode (T={}, period={period})",
                    dataset.t
                )));
            }
            let (means, stds) = standardize(&mut out.data, out.t, d_x, period)?;
            out.preprocessing = Preprocessing::Deseasonalize { period, means, stds };
        }
    }
    Ok(out)
}

/// Undo the stored preprocessing, returning raw-scale data.
pub fn invert_preprocess(dataset: &Dataset) -> Dataset {
    let d_x = dataset.d_x();
    let mut out = dataset.clone();
    match &dataset.preprocessing {
        Preprocessing::Identity => {}
        Preprocessing::Normalize { means, stds } => {
            for step in 0..out.t {
                let row = &mut out.data[step * d_x..(step + 1) * d_x];
                for (cell, v) in row.iter_mut().enumerate() {
                    *v = *v * stds[cell] + means[cell];
                }
            }
            out.preprocessing = Preprocessing::Identity;
        }
        Preprocessing::Deseasonalize { period, means, stds } => {
            for step in 0..out.t {
                let phase = step % period;
                let row = &mut out.data[step * d_x..(step + 1) * d_x];
                for (cell, v) in row.iter_mut().enumerate() {
                    let idx = phase * d_x + cell;
                    *v = *v * stds[idx] + means[idx];
                }
            }
            out.preprocessing = Preprocessing::Identity;
        }
    }
    out
}

/// Apply previously fitted constants to new raw data on the same grid.
pub fn apply_preprocess(dataset: &Dataset, constants: &Preprocessing) -> Result<Dataset> {
    let d_x = dataset.d_x();
    let mut out = dataset.clone();
    match constants {
        Preprocessing::Identity => {}
        Preprocessing::Normalize { means, stds } => {
            if means.len() != d_x {
                return Err(Error::shape("normalization constants do not match grid"));
            }
            for step in 0..out.t {
                let row = &mut out.data[step * d_x..(step + 1) * d_x];
                for (cell, v) in row.iter_mut().enumerate() {
                    *v = (*v - means[cell]) / stds[cell];
                }
            }
        }
        Preprocessing::Deseasonalize { period, means, stds } => {
            if means.len() != period * d_x {
                return Err(Error::shape("seasonal constants do not match grid"));
            }
            for step in 0..out.t {
                let phase = step % period;
                let row = &mut out.data[step * d_x..(step + 1) * d_x];
                for (cell, v) in row.iter_mut().enumerate() {
                    let idx = phase * d_x + cell;
                    *v = (*v - means[idx]) / stds[idx];
                }
            }
        }
    }
    out.preprocessing = constants.clone();
    Ok(out)
}
