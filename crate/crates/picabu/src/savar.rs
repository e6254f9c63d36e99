//! Synthetic spatially-averaged vector-autoregressive benchmarks with a
//! known lagged causal graph.
//!
//! Each of the N latent modes drives one non-overlapping Gaussian bump on
//! its own grid patch; latents follow a linear autoregression over lags
//! 1..=tau whose structure is sampled per difficulty level. Observation
//! noise is added per cell with variance proportional to that cell's signal
//! variance.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{beta_sample, RngStream};

/// Difficulty levels, ordered by cross-edge probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    Easy,
    MedEasy,
    MedHard,
    Hard,
}

impl Difficulty {
    /// Probability that an ordered latent pair (i, j), i != j, is connected.
    pub fn edge_probability(self, n_latents: usize) -> f64 {
        match self {
            Difficulty::Easy => 0.0,
            Difficulty::MedEasy => 1.0 / (n_latents as f64 - 1.0),
            Difficulty::MedHard => 2.0 / (n_latents as f64 - 1.0),
            Difficulty::Hard => 0.5,
        }
    }

    /// Expected edge count: one self-edge per latent plus cross edges.
    pub fn expected_edges(self, n_latents: usize) -> f64 {
        let n = n_latents as f64;
        n + n * (n - 1.0) * self.edge_probability(n_latents)
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "med-easy" => Ok(Difficulty::MedEasy),
            "med-hard" => Ok(Difficulty::MedHard),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::invalid(format!(
                "unknown difficulty `{other}` (expected easy|med-easy|med-hard|hard)"
            ))),
        }
    }
}

/// How sampled link strengths are rescaled for stability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrengthNormalization {
    /// Scale each latent's incoming-strength vector to l1 norm <= 0.95,
    /// which bounds the companion spectral radius by 0.95.
    #[default]
    PerRow,
    /// Scale all strengths by one factor found by bisection so the
    /// companion spectral radius is <= 0.95.
    Spectral,
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavarSpec {
    pub n_latents: usize,
    pub difficulty: Difficulty,
    /// Maximum causal lag.
    pub tau: usize,
    pub timesteps: usize,
    /// Observation noise variance as a fraction of per-cell signal variance.
    pub noise_ratio: f64,
    /// Cells per mode patch; must be a perfect square.
    pub grid_cells_per_mode: usize,
    pub seed: u64,
    #[serde(default)]
    pub normalization: StrengthNormalization,
}

impl SavarSpec {
    pub fn new(n_latents: usize, difficulty: Difficulty, timesteps: usize, seed: u64) -> Self {
        SavarSpec {
            n_latents,
            difficulty,
            tau: 5,
            timesteps,
            noise_ratio: 1.0,
            grid_cells_per_mode: 25,
            seed,
            normalization: StrengthNormalization::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_latents < 2 {
            return Err(Error::invalid("need at least 2 latents".to_string()));
        }
        if self.tau == 0 {
            return Err(Error::invalid("tau must be >= 1".to_string()));
        }
        if self.timesteps < 2 {
            return Err(Error::invalid("timesteps must be >= 2".to_string()));
        }
        if self.noise_ratio < 0.0 {
            return Err(Error::invalid("noise_ratio must be >= 0".to_string()));
        }
        let side = (self.grid_cells_per_mode as f64).sqrt().round() as usize;
        if side * side != self.grid_cells_per_mode || side == 0 {
            return Err(Error::invalid(format!(
                "grid_cells_per_mode must be a perfect square, got {}",
                self.grid_cells_per_mode
            )));
        }
        Ok(())
    }

    /// Patch side length.
    pub fn patch_side(&self) -> usize {
        (self.grid_cells_per_mode as f64).sqrt().round() as usize
    }

    /// Patches are tiled on a ceil(sqrt(N)) x ceil(sqrt(N)) arrangement.
    pub fn patches_per_side(&self) -> usize {
        (self.n_latents as f64).sqrt().ceil() as usize
    }

    /// Observation grid (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        let side = self.patch_side() * self.patches_per_side();
        (side, side)
    }
}

/// Ground-truth lagged adjacency and strengths.
///
/// Entry `(k, i, j)` refers to the influence of latent `j` at time `t-(k+1)`
/// on latent `i` at time `t`; `adjacency == 1` exactly where `strengths` is
/// non-zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGraph {
    pub n_latents: usize,
    pub tau: usize,
    pub adjacency: Vec<u8>,
    pub strengths: Vec<f64>,
}

impl GroundTruthGraph {
    #[inline]
    pub fn idx(&self, lag_minus_1: usize, target: usize, source: usize) -> usize {
        (lag_minus_1 * self.n_latents + target) * self.n_latents + source
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a != 0).count()
    }

    /// Largest-magnitude eigenvalue of the stacked companion matrix,
    /// estimated by power iteration.
    pub fn companion_spectral_radius(&self) -> f64 {
        companion_spectral_radius(self.n_latents, self.tau, &self.strengths)
    }
}

fn companion_spectral_radius(n: usize, tau: usize, strengths: &[f64]) -> f64 {
    let dim = n * tau;
    let mut v = vec![0.0; dim];
    for (i, x) in v.iter_mut().enumerate() {
        // Deterministic, fully dense start vector.
        *x = 1.0 + (i as f64 * 0.7).sin();
    }
    let apply = |src: &[f64], dst: &mut [f64]| {
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..tau {
                let block = &src[k * n..(k + 1) * n];
                let row = &strengths[(k * n + i) * n..(k * n + i) * n + n];
                for (a, b) in row.iter().zip(block) {
                    acc += a * b;
                }
            }
            dst[i] = acc;
        }
        for k in (1..tau).rev() {
            for i in 0..n {
                dst[k * n + i] = src[(k - 1) * n + i];
            }
        }
    };
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut buf = vec![0.0; dim];
    let mut log_growth = 0.0;
    let mut counted = 0usize;
    for it in 0..400 {
        apply(&v, &mut buf);
        let nb = norm(&buf);
        if nb == 0.0 {
            return 0.0;
        }
        if it >= 200 {
            log_growth += nb.ln();
            counted += 1;
        }
        for (dst, src) in v.iter_mut().zip(&buf) {
            *dst = src / nb;
        }
    }
    (log_growth / counted as f64).exp()
}

/// Sample a ground-truth graph: one self-edge per latent at a uniform lag,
/// each ordered cross pair connected with the difficulty's probability at a
/// uniform lag, strengths drawn Beta(4, 8), then rescaled for stability.
pub fn sample_graph(spec: &SavarSpec, rng: &mut RngStream) -> Result<GroundTruthGraph> {
    spec.validate()?;
    let n = spec.n_latents;
    let tau = spec.tau;
    let mut graph = GroundTruthGraph {
        n_latents: n,
        tau,
        adjacency: vec![0; tau * n * n],
        strengths: vec![0.0; tau * n * n],
    };
    let p = spec.difficulty.edge_probability(n);
    for i in 0..n {
        for j in 0..n {
            let connected = if i == j { true } else { rng.uniform_open() < p };
            if connected {
                let lag = rng.below(tau);
                let idx = graph.idx(lag, i, j);
                graph.adjacency[idx] = 1;
                graph.strengths[idx] = beta_sample(4.0, 8.0, rng)?;
            }
        }
    }
    if let StrengthNormalization::PerRow = spec.normalization {
        for i in 0..n {
            let mut row_l1 = 0.0;
            for k in 0..tau {
                for j in 0..n {
                    row_l1 += graph.strengths[graph.idx(k, i, j)].abs();
                }
            }
            if row_l1 > 0.95 {
                let scale = 0.95 / row_l1;
                for k in 0..tau {
                    for j in 0..n {
                        let idx = graph.idx(k, i, j);
                        graph.strengths[idx] *= scale;
                    }
                }
            }
        }
    }
    // Row scaling alone guarantees stability but the radius can still land
    // in (0.95, 1); a uniform rescale enforces the 0.95 bound in both modes.
    let rho = graph.companion_spectral_radius();
    if rho > 0.95 {
        let mut lo = 0.0;
        let mut hi = 1.0;
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let scaled: Vec<f64> = graph.strengths.iter().map(|s| s * mid).collect();
            if companion_spectral_radius(n, tau, &scaled) > 0.95 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        for s in graph.strengths.iter_mut() {
            *s *= lo;
        }
    }
    Ok(graph)
}

/// The latent-to-grid mode matrix: entry `(latent, cell)` is the
/// peak-normalized Gaussian bump of that latent's patch at that cell.
pub fn mode_matrix(spec: &SavarSpec) -> Vec<f64> {
    let n = spec.n_latents;
    let side = spec.patch_side();
    let per = spec.patches_per_side();
    let (h, w) = spec.grid();
    let d_x = h * w;
    let sigma = side as f64 / 4.0;
    let centre = (side as f64 - 1.0) / 2.0;
    let mut m = vec![0.0; n * d_x];
    for latent in 0..n {
        let py = latent / per;
        let px = latent % per;
        for dy in 0..side {
            for dx in 0..side {
                let y = py * side + dy;
                let x = px * side + dx;
                let ry = dy as f64 - centre;
                let rx = dx as f64 - centre;
                m[latent * d_x + y * w + x] =
                    (-(ry * ry + rx * rx) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    m
}

/// Ground-truth cell-to-latent assignment (argmax of the mode matrix;
/// `usize::MAX` for cells outside every patch).
pub fn mode_assignment(spec: &SavarSpec) -> Vec<usize> {
    let m = mode_matrix(spec);
    let (h, w) = spec.grid();
    let d_x = h * w;
    (0..d_x)
        .map(|cell| {
            let mut best = usize::MAX;
            let mut best_v = 0.0;
            for latent in 0..spec.n_latents {
                let v = m[latent * d_x + cell];
                if v > best_v {
                    best_v = v;
                    best = latent;
                }
            }
            best
        })
        .collect()
}

/// Simulated data plus the generating latent series.
pub struct Simulation {
    pub dataset: Dataset,
    /// Row-major T x N latent values.
    pub latents: Vec<f64>,
}

/// Run the autoregression and observe it through the mode matrix.
///
/// Innovations are standard normal; a burn-in of 10*tau steps is discarded;
/// per-cell observation noise has `noise_ratio` times that cell's empirical
/// signal variance. Deterministic given the rng stream.
pub fn simulate_with_latents(
    spec: &SavarSpec,
    graph: &GroundTruthGraph,
    rng: &mut RngStream,
) -> Result<Simulation> {
    spec.validate()?;
    let n = spec.n_latents;
    if graph.n_latents != n || graph.tau != spec.tau {
        return Err(Error::shape(format!(
            "graph is {}x{} lags {}, spec wants {}x{} lags {}",
            graph.n_latents, graph.n_latents, graph.tau, n, n, spec.tau
        )));
    }
    let rho = graph.companion_spectral_radius();
    if rho >= 1.0 {
        return Err(Error::Training {
            block: "savar::simulate".to_string(),
            reason: format!("normalized graph is unstable (spectral radius {rho:.4})"),
        });
    }
    let tau = spec.tau;
    let t_total = spec.timesteps + 10 * tau;
    let mut z = vec![0.0; t_total * n];
    for step in 0..t_total {
        for i in 0..n {
            let mut acc = rng.normal();
            for k in 0..tau {
                if step > k {
                    let past = &z[(step - k - 1) * n..(step - k) * n];
                    let row = &graph.strengths[(k * n + i) * n..(k * n + i) * n + n];
                    for (a, b) in row.iter().zip(past) {
                        acc += a * b;
                    }
                }
            }
            z[step * n + i] = acc;
        }
    }
    let burn = 10 * tau;
    let t = spec.timesteps;
    let latents: Vec<f64> = z[burn * n..].to_vec();

    let modes = mode_matrix(spec);
    let (h, w) = spec.grid();
    let d_x = h * w;
    let mut clean = vec![0.0; t * d_x];
    for step in 0..t {
        let zrow = &latents[step * n..(step + 1) * n];
        let out = &mut clean[step * d_x..(step + 1) * d_x];
        for (latent, &zv) in zrow.iter().enumerate() {
            if zv != 0.0 {
                let mrow = &modes[latent * d_x..(latent + 1) * d_x];
                for (o, &m) in out.iter_mut().zip(mrow) {
                    *o += m * zv;
                }
            }
        }
    }
    // Per-cell noise std from the empirical signal variance.
    let mut cell_var = vec![0.0; d_x];
    let mut cell_mean = vec![0.0; d_x];
    for step in 0..t {
        for (cell, &v) in clean[step * d_x..(step + 1) * d_x].iter().enumerate() {
            cell_mean[cell] += v;
        }
    }
    for m in cell_mean.iter_mut() {
        *m /= t as f64;
    }
    for step in 0..t {
        for (cell, &v) in clean[step * d_x..(step + 1) * d_x].iter().enumerate() {
            let d = v - cell_mean[cell];
            cell_var[cell] += d * d;
        }
    }
    let noise_sd: Vec<f64> =
        cell_var.iter().map(|v| (spec.noise_ratio * v / t as f64).sqrt()).collect();
    let mut data = clean;
    if spec.noise_ratio > 0.0 {
        for step in 0..t {
            for (cell, v) in data[step * d_x..(step + 1) * d_x].iter_mut().enumerate() {
                *v += noise_sd[cell] * rng.normal();
            }
        }
    }
    let dataset = Dataset::new(data, t, (h, w), vec!["v0".to_string()])?;
    Ok(Simulation { dataset, latents })
}

/// As [`simulate_with_latents`], returning only the dataset.
pub fn simulate(spec: &SavarSpec, graph: &GroundTruthGraph, rng: &mut RngStream) -> Result<Dataset> {
    Ok(simulate_with_latents(spec, graph, rng)?.dataset)
}

/// Sample a graph and simulate it, deriving both rng streams from the spec
/// seed (streams 0 and 1).
pub fn generate(spec: &SavarSpec) -> Result<(GroundTruthGraph, Dataset)> {
    let root = RngStream::new(spec.seed, 0);
    let mut graph_rng = root.substream(0);
    let mut sim_rng = root.substream(1);
    let graph = sample_graph(spec, &mut graph_rng)?;
    let data = simulate(spec, &graph, &mut sim_rng)?;
    Ok((graph, data))
}
