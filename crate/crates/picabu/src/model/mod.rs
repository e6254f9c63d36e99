//! The single-parent latent generative model.
//!
//! Observations x live on a flat grid; latents z evolve through a lagged
//! transition gated by a sampled binary graph. Cell means depend on z only
//! through the non-negative mapping matrix W, one weighted sum per cell, so
//! orthogonality plus non-negativity of W pushes each cell toward a single
//! latent parent.
//!
//! Two parameterization tiers share the same contracts: `Linear` (affine
//! encoder, per-cell affine decoder, linear lagged transition) and `Shared`
//! (one perceptron per role, fed learned positional embeddings).
//!
//! Index conventions, used everywhere downstream:
//! * graph entry `(k, i, j)` = influence of latent `j` at time `t-(k+1)` on
//!   latent `i` at time `t`, flattened as `(k * d_z + i) * d_z + j`;
//! * latent histories are chronological (`row 0` = oldest), so lag `k+1`
//!   reads history row `tau - 1 - k`.

mod elbo;
mod mlp;

pub use elbo::{elbo, ElboBreakdown};
pub use mlp::{Mlp, MlpCache};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Initial graph logit: edges start likely-present and are sparsified by
/// the one-sided constraint during training.
pub const GAMMA_INIT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Linear,
    Shared,
}

/// Widths of the shared tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedWidths {
    pub emb_dim: usize,
    pub trans_hidden: usize,
    pub encdec_hidden: usize,
}

impl Default for SharedWidths {
    fn default() -> Self {
        SharedWidths { emb_dim: 4, trans_hidden: 8, encdec_hidden: 16 }
    }
}

/// Architecture: every shape needed to rebuild a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub tau: usize,
    pub d_z: usize,
    /// Observation dimension; equals grid.0 * grid.1 * channels.
    pub d_x: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    pub parameterization: Parameterization,
    pub shared: SharedWidths,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.d_z == 0 || self.d_x == 0 {
            return Err(Error::invalid("tau, d_z, d_x must be positive".to_string()));
        }
        if self.grid.0 * self.grid.1 * self.channels != self.d_x {
            return Err(Error::shape(format!(
                "grid {}x{} with {} channels does not give d_x = {}",
                self.grid.0, self.grid.1, self.channels, self.d_x
            )));
        }
        Ok(())
    }

    pub fn n_edges(&self) -> usize {
        self.tau * self.d_z * self.d_z
    }
}

/// Tier-specific parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum Tier {
    Linear {
        /// Encoder weight, d_z x d_x row-major, plus bias.
        enc_w: Vec<f64>,
        enc_b: Vec<f64>,
        /// Transition coefficients aligned with the graph layout, plus bias.
        trans_w: Vec<f64>,
        trans_b: Vec<f64>,
        /// Per-cell affine decoder on (W z)_c.
        dec_gain: Vec<f64>,
        dec_bias: Vec<f64>,
    },
    Shared {
        enc: Mlp,
        /// Per-latent encoder embeddings, d_z x emb_dim.
        enc_emb: Vec<f64>,
        trans: Mlp,
        trans_emb: Vec<f64>,
        dec: Mlp,
        /// Per-cell decoder embeddings, d_x x emb_dim.
        dec_emb: Vec<f64>,
    },
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Graph logits, tau x d_z x d_z.
    pub gamma: Vec<f64>,
    /// Non-negative mapping matrix, d_x x d_z row-major.
    pub w_map: Vec<f64>,
    pub tier: Tier,
    pub obs_logvar: Vec<f64>,
    pub post_logvar: Vec<f64>,
    pub trans_logvar: Vec<f64>,
}

impl Params {
    /// Named blocks in checkpoint order.
    pub fn blocks(&self) -> Vec<(&'static str, &Vec<f64>)> {
        let mut out: Vec<(&'static str, &Vec<f64>)> =
            vec![("gamma", &self.gamma), ("w_map", &self.w_map)];
        match &self.tier {
            Tier::Linear { enc_w, enc_b, trans_w, trans_b, dec_gain, dec_bias } => {
                out.extend([
                    ("enc_w", enc_w),
                    ("enc_b", enc_b),
                    ("trans_w", trans_w),
                    ("trans_b", trans_b),
                    ("dec_gain", dec_gain),
                    ("dec_bias", dec_bias),
                ]);
            }
            Tier::Shared { enc, enc_emb, trans, trans_emb, dec, dec_emb } => {
                out.extend([
                    ("enc_w1", &enc.w1),
                    ("enc_b1", &enc.b1),
                    ("enc_w2", &enc.w2),
                    ("enc_b2", &enc.b2),
                    ("enc_w3", &enc.w3),
                    ("enc_b3", &enc.b3),
                    ("enc_emb", enc_emb),
                    ("trans_w1", &trans.w1),
                    ("trans_b1", &trans.b1),
                    ("trans_w2", &trans.w2),
                    ("trans_b2", &trans.b2),
                    ("trans_w3", &trans.w3),
                    ("trans_b3", &trans.b3),
                    ("trans_emb", trans_emb),
                    ("dec_w1", &dec.w1),
                    ("dec_b1", &dec.b1),
                    ("dec_w2", &dec.w2),
                    ("dec_b2", &dec.b2),
                    ("dec_w3", &dec.w3),
                    ("dec_b3", &dec.b3),
                    ("dec_emb", dec_emb),
                ]);
            }
        }
        out.extend([
            ("obs_logvar", &self.obs_logvar),
            ("post_logvar", &self.post_logvar),
            ("trans_logvar", &self.trans_logvar),
        ]);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        let mut out: Vec<(&'static str, &mut Vec<f64>)> =
            vec![("gamma", &mut self.gamma), ("w_map", &mut self.w_map)];
        match &mut self.tier {
            Tier::Linear { enc_w, enc_b, trans_w, trans_b, dec_gain, dec_bias } => {
                out.extend([
                    ("enc_w", enc_w),
                    ("enc_b", enc_b),
                    ("trans_w", trans_w),
                    ("trans_b", trans_b),
                    ("dec_gain", dec_gain),
                    ("dec_bias", dec_bias),
                ]);
            }
            Tier::Shared { enc, enc_emb, trans, trans_emb, dec, dec_emb } => {
                out.extend([
                    ("enc_w1", &mut enc.w1),
                    ("enc_b1", &mut enc.b1),
                    ("enc_w2", &mut enc.w2),
                    ("enc_b2", &mut enc.b2),
                    ("enc_w3", &mut enc.w3),
                    ("enc_b3", &mut enc.b3),
                    ("enc_emb", enc_emb),
                    ("trans_w1", &mut trans.w1),
                    ("trans_b1", &mut trans.b1),
                    ("trans_w2", &mut trans.w2),
                    ("trans_b2", &mut trans.b2),
                    ("trans_w3", &mut trans.w3),
                    ("trans_b3", &mut trans.b3),
                    ("trans_emb", trans_emb),
                    ("dec_w1", &mut dec.w1),
                    ("dec_b1", &mut dec.b1),
                    ("dec_w2", &mut dec.w2),
                    ("dec_b2", &mut dec.b2),
                    ("dec_w3", &mut dec.w3),
                    ("dec_b3", &mut dec.b3),
                    ("dec_emb", dec_emb),
                ]);
            }
        }
        out.extend([
            ("obs_logvar", &mut self.obs_logvar),
            ("post_logvar", &mut self.post_logvar),
            ("trans_logvar", &mut self.trans_logvar),
        ]);
        out
    }

    pub fn zeros_like(&self) -> Params {
        let mut out = self.clone();
        for (_, block) in out.blocks_mut() {
            block.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn flat_get(&self, mut index: usize) -> f64 {
        for (_, block) in self.blocks() {
            if index < block.len() {
                return block[index];
            }
            index -= block.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, mut index: usize, value: f64) {
        for (_, block) in self.blocks_mut() {
            if index < block.len() {
                block[index] = value;
                return;
            }
            index -= block.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_collect(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, block) in self.blocks() {
            out.extend_from_slice(block);
        }
        out
    }

    /// Name of the first block containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.blocks()
            .into_iter()
            .find(|(_, b)| b.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    pub arch: ModelArch,
    pub params: Params,
}

impl LatentModel {
    /// Fresh model: gamma at `GAMMA_INIT`, W uniform-positive with
    /// l2-normalized columns, small random encoder/transition weights.
    pub fn init(arch: ModelArch, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let (d_z, d_x, tau) = (arch.d_z, arch.d_x, arch.tau);
        let mut w_map = vec![0.0; d_x * d_z];
        for v in w_map.iter_mut() {
            *v = rng.uniform_open();
        }
        for col in 0..d_z {
            let norm: f64 =
                (0..d_x).map(|c| w_map[c * d_z + col] * w_map[c * d_z + col]).sum::<f64>().sqrt();
            for c in 0..d_x {
                w_map[c * d_z + col] /= norm;
            }
        }
        let tier = match arch.parameterization {
            Parameterization::Linear => {
                let enc_sd = 1.0 / (d_x as f64).sqrt();
                Tier::Linear {
                    enc_w: (0..d_z * d_x).map(|_| enc_sd * rng.normal()).collect(),
                    enc_b: vec![0.0; d_z],
                    trans_w: (0..tau * d_z * d_z).map(|_| 0.1 * rng.normal()).collect(),
                    trans_b: vec![0.0; d_z],
                    dec_gain: vec![1.0; d_x],
                    dec_bias: vec![0.0; d_x],
                }
            }
            Parameterization::Shared => {
                let sw = arch.shared;
                let trans_in = tau * d_z + sw.emb_dim;
                let enc_in = 1 + sw.emb_dim;
                let dec_in = 1 + sw.emb_dim;
                Tier::Shared {
                    enc: Mlp::init(enc_in, sw.encdec_hidden, rng),
                    enc_emb: (0..d_z * sw.emb_dim).map(|_| 0.5 * rng.normal()).collect(),
                    trans: Mlp::init(trans_in, sw.trans_hidden, rng),
                    trans_emb: (0..d_z * sw.emb_dim).map(|_| 0.5 * rng.normal()).collect(),
                    dec: Mlp::init(dec_in, sw.encdec_hidden, rng),
                    dec_emb: (0..d_x * sw.emb_dim).map(|_| 0.5 * rng.normal()).collect(),
                }
            }
        };
        let params = Params {
            gamma: vec![GAMMA_INIT; tau * d_z * d_z],
            w_map,
            tier,
            obs_logvar: vec![0.0; d_x],
            post_logvar: vec![(0.1f64).ln(); d_z],
            trans_logvar: vec![0.0; d_z],
        };
        Ok(LatentModel { arch, params })
    }

    #[inline]
    pub fn edge_index(&self, lag_minus_1: usize, target: usize, source: usize) -> usize {
        (lag_minus_1 * self.arch.d_z + target) * self.arch.d_z + source
    }

    pub fn obs_var(&self) -> Vec<f64> {
        self.params.obs_logvar.iter().map(|v| v.exp()).collect()
    }

    pub fn post_var(&self) -> Vec<f64> {
        self.params.post_logvar.iter().map(|v| v.exp()).collect()
    }

    pub fn trans_var(&self) -> Vec<f64> {
        self.params.trans_logvar.iter().map(|v| v.exp()).collect()
    }

    /// sigma(gamma) per edge.
    pub fn edge_probabilities(&self) -> Vec<f64> {
        self.params.gamma.iter().map(|&g| sigmoid(g)).collect()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One sampled relaxed-Bernoulli graph.
///
/// `values` are the forward-pass gate values (0/1 in hard mode, in (0,1) in
/// soft mode); `ste` holds d(value)/d(gamma) under the straight-through
/// convention, i.e. the relaxed gate's derivative in both modes.
#[derive(Debug, Clone)]
pub struct GraphSample {
    pub values: Vec<f64>,
    pub ste: Vec<f64>,
    pub hard: bool,
}

/// Draw a Gumbel-sigmoid graph sample.
pub fn sample_graph(
    model: &LatentModel,
    temperature: f64,
    rng: &mut RngStream,
    hard: bool,
) -> Result<GraphSample> {
    if temperature <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let n = model.arch.n_edges();
    let mut sample = GraphSample { values: vec![0.0; n], ste: vec![0.0; n], hard };
    sample_graph_into(model, temperature, rng, hard, &mut sample);
    Ok(sample)
}

/// Allocation-free variant for hot loops.
pub fn sample_graph_into(
    model: &LatentModel,
    temperature: f64,
    rng: &mut RngStream,
    hard: bool,
    out: &mut GraphSample,
) {
    let n = model.arch.n_edges();
    out.values.resize(n, 0.0);
    out.ste.resize(n, 0.0);
    out.hard = hard;
    for (e, &g) in model.params.gamma.iter().enumerate() {
        let s = sigmoid(g);
        let u = rng.uniform_open();
        // Logistic noise l = logit(u); the gate opens iff g + l > 0, and the
        // relaxed gate is sigmoid((g + l) / temperature).
        let soft = if temperature == 1.0 {
            let a = u * s;
            let b = (1.0 - u) * (1.0 - s);
            a / (a + b)
        } else {
            sigmoid((g + (u / (1.0 - u)).ln()) / temperature)
        };
        out.ste[e] = soft * (1.0 - soft) / temperature;
        out.values[e] = if hard {
            if u > 1.0 - s {
                1.0
            } else {
                0.0
            }
        } else {
            soft
        };
    }
}

/// Per-step Gaussian posterior over latents.
#[derive(Debug, Clone)]
pub struct Posterior {
    /// Row-major steps x d_z.
    pub means: Vec<f64>,
    pub steps: usize,
    /// Shared across steps.
    pub vars: Vec<f64>,
}

/// Scratch for encoder forward/backward (shared tier).
#[derive(Debug, Default)]
pub struct EncodeCache {
    /// Pooled inputs p = W^T x per step, steps x d_z.
    pooled: Vec<f64>,
    mlp: Vec<MlpCache>,
    input: Vec<f64>,
}

/// Encode a window of rows into per-step posterior means.
pub fn encode_into(
    model: &LatentModel,
    rows: &[&[f64]],
    means: &mut Vec<f64>,
    cache: &mut EncodeCache,
) {
    let d_z = model.arch.d_z;
    let d_x = model.arch.d_x;
    let steps = rows.len();
    means.resize(steps * d_z, 0.0);
    match &model.params.tier {
        Tier::Linear { enc_w, enc_b, .. } => {
            for (s, row) in rows.iter().enumerate() {
                let out = &mut means[s * d_z..(s + 1) * d_z];
                for i in 0..d_z {
                    let wrow = &enc_w[i * d_x..(i + 1) * d_x];
                    let mut acc = enc_b[i];
                    for (w, v) in wrow.iter().zip(*row) {
                        acc += w * v;
                    }
                    out[i] = acc;
                }
            }
        }
        Tier::Shared { enc, enc_emb, .. } => {
            let emb = model.arch.shared.emb_dim;
            cache.pooled.resize(steps * d_z, 0.0);
            cache.mlp.resize_with(steps * d_z, MlpCache::default);
            cache.input.resize(1 + emb, 0.0);
            let w = &model.params.w_map;
            for (s, row) in rows.iter().enumerate() {
                let pooled = &mut cache.pooled[s * d_z..(s + 1) * d_z];
                pooled.iter_mut().for_each(|v| *v = 0.0);
                for (c, &x) in row.iter().enumerate() {
                    let wrow = &w[c * d_z..(c + 1) * d_z];
                    for i in 0..d_z {
                        pooled[i] += wrow[i] * x;
                    }
                }
                for i in 0..d_z {
                    cache.input[0] = pooled[i];
                    cache.input[1..].copy_from_slice(&enc_emb[i * emb..(i + 1) * emb]);
                    means[s * d_z + i] =
                        enc.forward(&cache.input, &mut cache.mlp[s * d_z + i]);
                }
            }
        }
    }
}

/// Per-step posterior parameters for a window of observations.
pub fn encode(model: &LatentModel, rows: &[&[f64]]) -> Result<Posterior> {
    for (s, row) in rows.iter().enumerate() {
        if row.len() != model.arch.d_x {
            return Err(Error::shape(format!(
                "encode: row {s} has length {}, expected {}",
                row.len(),
                model.arch.d_x
            )));
        }
    }
    let mut means = Vec::new();
    let mut cache = EncodeCache::default();
    encode_into(model, rows, &mut means, &mut cache);
    Ok(Posterior { means, steps: rows.len(), vars: model.post_var() })
}

/// Adjoint of [`encode_into`]; accumulates into `grads`.
pub fn encode_backward(
    model: &LatentModel,
    rows: &[&[f64]],
    cache: &EncodeCache,
    d_means: &[f64],
    grads: &mut Params,
) {
    let d_z = model.arch.d_z;
    let d_x = model.arch.d_x;
    match (&model.params.tier, &mut grads.tier) {
        (Tier::Linear { .. }, Tier::Linear { enc_w: g_w, enc_b: g_b, .. }) => {
            for (s, row) in rows.iter().enumerate() {
                let dm = &d_means[s * d_z..(s + 1) * d_z];
                for i in 0..d_z {
                    let g = dm[i];
                    if g != 0.0 {
                        g_b[i] += g;
                        let grow = &mut g_w[i * d_x..(i + 1) * d_x];
                        for (gw, v) in grow.iter_mut().zip(*row) {
                            *gw += g * v;
                        }
                    }
                }
            }
        }
        (
            Tier::Shared { enc, enc_emb, .. },
            Tier::Shared { enc: g_enc, enc_emb: g_emb, .. },
        ) => {
            let emb = model.arch.shared.emb_dim;
            let mut input = vec![0.0; 1 + emb];
            let mut d_input = vec![0.0; 1 + emb];
            for (s, row) in rows.iter().enumerate() {
                for i in 0..d_z {
                    let g = d_means[s * d_z + i];
                    if g == 0.0 {
                        continue;
                    }
                    input[0] = cache.pooled[s * d_z + i];
                    input[1..].copy_from_slice(&enc_emb[i * emb..(i + 1) * emb]);
                    d_input.iter_mut().for_each(|v| *v = 0.0);
                    enc.backward(&input, &cache.mlp[s * d_z + i], g, g_enc, &mut d_input);
                    // d pooled -> W gradient through p_i = sum_c W[c][i] x_c.
                    let dp = d_input[0];
                    if dp != 0.0 {
                        for (c, &x) in row.iter().enumerate() {
                            grads.w_map[c * d_z + i] += dp * x;
                        }
                    }
                    for (ge, di) in
                        g_emb[i * emb..(i + 1) * emb].iter_mut().zip(&d_input[1..])
                    {
                        *ge += di;
                    }
                }
            }
        }
        _ => unreachable!("tier mismatch between params and grads"),
    }
}

/// Reparameterized posterior draw: z = mean + sqrt(var) * eps.
pub fn sample_latents(posterior: &Posterior, rng: &mut RngStream) -> Vec<f64> {
    let d_z = posterior.vars.len();
    let mut out = vec![0.0; posterior.means.len()];
    let sd: Vec<f64> = posterior.vars.iter().map(|v| v.sqrt()).collect();
    for (s, chunk) in out.chunks_exact_mut(d_z).enumerate() {
        for i in 0..d_z {
            chunk[i] = posterior.means[s * d_z + i] + sd[i] * rng.normal();
        }
    }
    out
}

/// Scratch for transition forward/backward (shared tier).
#[derive(Debug, Default)]
pub struct TransitionCache {
    mlp: Vec<MlpCache>,
    input: Vec<f64>,
}

/// Graph-masked transition mean for every latent.
///
/// `hist` is chronological, length tau * d_z; the output mean has length
/// d_z. Latents are conditionally independent given the masked history.
pub fn transition_into(
    model: &LatentModel,
    graph_values: &[f64],
    hist: &[f64],
    mean: &mut Vec<f64>,
    cache: &mut TransitionCache,
) {
    let d_z = model.arch.d_z;
    let tau = model.arch.tau;
    debug_assert_eq!(hist.len(), tau * d_z);
    debug_assert_eq!(graph_values.len(), tau * d_z * d_z);
    mean.resize(d_z, 0.0);
    match &model.params.tier {
        Tier::Linear { trans_w, trans_b, .. } => {
            for i in 0..d_z {
                let mut acc = trans_b[i];
                for k in 0..tau {
                    let src = &hist[(tau - 1 - k) * d_z..(tau - k) * d_z];
                    let base = (k * d_z + i) * d_z;
                    let coeff = &trans_w[base..base + d_z];
                    let gate = &graph_values[base..base + d_z];
                    for j in 0..d_z {
                        acc += coeff[j] * gate[j] * src[j];
                    }
                }
                mean[i] = acc;
            }
        }
        Tier::Shared { trans, trans_emb, .. } => {
            let emb = model.arch.shared.emb_dim;
            let in_dim = tau * d_z + emb;
            cache.mlp.resize_with(d_z, MlpCache::default);
            cache.input.resize(in_dim, 0.0);
            for i in 0..d_z {
                for k in 0..tau {
                    let src = &hist[(tau - 1 - k) * d_z..(tau - k) * d_z];
                    let base = (k * d_z + i) * d_z;
                    let gate = &graph_values[base..base + d_z];
                    let dst = &mut cache.input[k * d_z..(k + 1) * d_z];
                    for j in 0..d_z {
                        dst[j] = gate[j] * src[j];
                    }
                }
                cache.input[tau * d_z..].copy_from_slice(&trans_emb[i * emb..(i + 1) * emb]);
                mean[i] = trans.forward(&cache.input, &mut cache.mlp[i]);
            }
        }
    }
}

/// Transition distribution (mean, var) given a graph sample and history.
pub fn transition(
    model: &LatentModel,
    graph: &GraphSample,
    hist: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if hist.len() != model.arch.tau * model.arch.d_z {
        return Err(Error::shape(format!(
            "transition: history length {} != tau*d_z = {}",
            hist.len(),
            model.arch.tau * model.arch.d_z
        )));
    }
    let mut mean = Vec::new();
    let mut cache = TransitionCache::default();
    transition_into(model, &graph.values, hist, &mut mean, &mut cache);
    Ok((mean, model.trans_var()))
}

/// Adjoint of [`transition_into`].
///
/// Accumulates parameter gradients (including gamma through the
/// straight-through factors in `graph.ste`) and history gradients.
#[allow(clippy::too_many_arguments)]
pub fn transition_backward(
    model: &LatentModel,
    graph: &GraphSample,
    hist: &[f64],
    cache: &TransitionCache,
    d_mean: &[f64],
    grads: &mut Params,
    d_hist: &mut [f64],
) {
    let d_z = model.arch.d_z;
    let tau = model.arch.tau;
    match (&model.params.tier, &mut grads.tier) {
        (Tier::Linear { trans_w, .. }, Tier::Linear { trans_w: g_w, trans_b: g_b, .. }) => {
            for i in 0..d_z {
                let g = d_mean[i];
                if g == 0.0 {
                    continue;
                }
                g_b[i] += g;
                for k in 0..tau {
                    let srow = tau - 1 - k;
                    let src = &hist[srow * d_z..(srow + 1) * d_z];
                    let d_src = &mut d_hist[srow * d_z..(srow + 1) * d_z];
                    let base = (k * d_z + i) * d_z;
                    for j in 0..d_z {
                        let coeff = trans_w[base + j];
                        let gate = graph.values[base + j];
                        g_w[base + j] += g * gate * src[j];
                        grads.gamma[base + j] += g * coeff * src[j] * graph.ste[base + j];
                        d_src[j] += g * coeff * gate;
                    }
                }
            }
        }
        (
            Tier::Shared { trans, trans_emb, .. },
            Tier::Shared { trans: g_t, trans_emb: g_emb, .. },
        ) => {
            let emb = model.arch.shared.emb_dim;
            let in_dim = tau * d_z + emb;
            let mut input = vec![0.0; in_dim];
            let mut d_input = vec![0.0; in_dim];
            for i in 0..d_z {
                let g = d_mean[i];
                if g == 0.0 {
                    continue;
                }
                for k in 0..tau {
                    let srow = tau - 1 - k;
                    let src = &hist[srow * d_z..(srow + 1) * d_z];
                    let base = (k * d_z + i) * d_z;
                    let gate = &graph.values[base..base + d_z];
                    let dst = &mut input[k * d_z..(k + 1) * d_z];
                    for j in 0..d_z {
                        dst[j] = gate[j] * src[j];
                    }
                }
                input[tau * d_z..].copy_from_slice(&trans_emb[i * emb..(i + 1) * emb]);
                d_input.iter_mut().for_each(|v| *v = 0.0);
                trans.backward(&input, &cache.mlp[i], g, g_t, &mut d_input);
                for k in 0..tau {
                    let srow = tau - 1 - k;
                    let src = &hist[srow * d_z..(srow + 1) * d_z];
                    let d_src = &mut d_hist[srow * d_z..(srow + 1) * d_z];
                    let base = (k * d_z + i) * d_z;
                    for j in 0..d_z {
                        let du = d_input[k * d_z + j];
                        grads.gamma[base + j] += du * src[j] * graph.ste[base + j];
                        d_src[j] += du * graph.values[base + j];
                    }
                }
                for (ge, di) in
                    g_emb[i * emb..(i + 1) * emb].iter_mut().zip(&d_input[tau * d_z..])
                {
                    *ge += di;
                }
            }
        }
        _ => unreachable!("tier mismatch between params and grads"),
    }
}

/// Scratch for decoder forward/backward.
#[derive(Debug, Default)]
pub struct DecodeCache {
    /// (W z)_c per cell.
    pub pooled: Vec<f64>,
    mlp: Vec<MlpCache>,
    input: Vec<f64>,
}

/// Per-cell decoded mean; cell c depends on z only through (W z)_c.
pub fn decode_into(model: &LatentModel, z: &[f64], mean: &mut Vec<f64>, cache: &mut DecodeCache) {
    let d_z = model.arch.d_z;
    let d_x = model.arch.d_x;
    debug_assert_eq!(z.len(), d_z);
    mean.resize(d_x, 0.0);
    cache.pooled.resize(d_x, 0.0);
    let w = &model.params.w_map;
    for c in 0..d_x {
        let wrow = &w[c * d_z..(c + 1) * d_z];
        let mut acc = 0.0;
        for (wv, zv) in wrow.iter().zip(z) {
            acc += wv * zv;
        }
        cache.pooled[c] = acc;
    }
    match &model.params.tier {
        Tier::Linear { dec_gain, dec_bias, .. } => {
            for c in 0..d_x {
                mean[c] = dec_gain[c] * cache.pooled[c] + dec_bias[c];
            }
        }
        Tier::Shared { dec, dec_emb, .. } => {
            let emb = model.arch.shared.emb_dim;
            cache.mlp.resize_with(d_x, MlpCache::default);
            cache.input.resize(1 + emb, 0.0);
            for c in 0..d_x {
                cache.input[0] = cache.pooled[c];
                cache.input[1..].copy_from_slice(&dec_emb[c * emb..(c + 1) * emb]);
                mean[c] = dec.forward(&cache.input, &mut cache.mlp[c]);
            }
        }
    }
}

/// Decoded observation distribution (mean, var) for one latent vector.
pub fn decode(model: &LatentModel, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.len() != model.arch.d_z {
        return Err(Error::shape(format!(
            "decode: z has length {}, expected {}",
            z.len(),
            model.arch.d_z
        )));
    }
    let mut mean = Vec::new();
    let mut cache = DecodeCache::default();
    decode_into(model, z, &mut mean, &mut cache);
    Ok((mean, model.obs_var()))
}

/// Adjoint of [`decode_into`]; accumulates into `grads` and `d_z`.
pub fn decode_backward(
    model: &LatentModel,
    z: &[f64],
    cache: &DecodeCache,
    d_mean: &[f64],
    grads: &mut Params,
    d_z: &mut [f64],
) {
    let d_z_dim = model.arch.d_z;
    let d_x = model.arch.d_x;
    let w = &model.params.w_map;
    match (&model.params.tier, &mut grads.tier) {
        (
            Tier::Linear { dec_gain, .. },
            Tier::Linear { dec_gain: g_gain, dec_bias: g_bias, .. },
        ) => {
            for c in 0..d_x {
                let g = d_mean[c];
                if g == 0.0 {
                    continue;
                }
                g_gain[c] += g * cache.pooled[c];
                g_bias[c] += g;
                let ds = g * dec_gain[c];
                let wrow = &w[c * d_z_dim..(c + 1) * d_z_dim];
                let gw = &mut grads.w_map[c * d_z_dim..(c + 1) * d_z_dim];
                for j in 0..d_z_dim {
                    gw[j] += ds * z[j];
                    d_z[j] += ds * wrow[j];
                }
            }
        }
        (Tier::Shared { dec, dec_emb, .. }, Tier::Shared { dec: g_dec, dec_emb: g_emb, .. }) => {
            let emb = model.arch.shared.emb_dim;
            let mut input = vec![0.0; 1 + emb];
            let mut d_input = vec![0.0; 1 + emb];
            for c in 0..d_x {
                let g = d_mean[c];
                if g == 0.0 {
                    continue;
                }
                input[0] = cache.pooled[c];
                input[1..].copy_from_slice(&dec_emb[c * emb..(c + 1) * emb]);
                d_input.iter_mut().for_each(|v| *v = 0.0);
                dec.backward(&input, &cache.mlp[c], g, g_dec, &mut d_input);
                let ds = d_input[0];
                let wrow = &w[c * d_z_dim..(c + 1) * d_z_dim];
                let gw = &mut grads.w_map[c * d_z_dim..(c + 1) * d_z_dim];
                for j in 0..d_z_dim {
                    gw[j] += ds * z[j];
                    d_z[j] += ds * wrow[j];
                }
                for (ge, di) in g_emb[c * emb..(c + 1) * emb].iter_mut().zip(&d_input[1..]) {
                    *ge += di;
                }
            }
        }
        _ => unreachable!("tier mismatch between params and grads"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_arch(parameterization: Parameterization) -> ModelArch {
        ModelArch {
            tau: 2,
            d_z: 3,
            d_x: 12,
            grid: (3, 4),
            channels: 1,
            parameterization,
            shared: SharedWidths::default(),
        }
    }

    fn linear_model(seed: u64) -> LatentModel {
        let mut rng = RngStream::new(seed, 0);
        LatentModel::init(small_arch(Parameterization::Linear), &mut rng).unwrap()
    }

    #[test]
    fn init_shapes_and_invariants() {
        for p in [Parameterization::Linear, Parameterization::Shared] {
            let mut rng = RngStream::new(1, 0);
            let m = LatentModel::init(small_arch(p), &mut rng).unwrap();
            assert!(m.params.w_map.iter().all(|&v| v >= 0.0));
            assert!(m.params.gamma.iter().all(|&g| g == GAMMA_INIT));
            // Columns of W start near unit norm.
            for col in 0..3 {
                let n: f64 = (0..12)
                    .map(|c| m.params.w_map[c * 3 + col] * m.params.w_map[c * 3 + col])
                    .sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
            assert_eq!(m.params.n_params(), m.params.flat_collect().len());
        }
    }

    #[test]
    fn flat_roundtrip() {
        let mut m = linear_model(3);
        let n = m.params.n_params();
        let before = m.params.flat_collect();
        m.params.flat_set(n - 1, 42.0);
        assert_eq!(m.params.flat_get(n - 1), 42.0);
        m.params.flat_set(n - 1, before[n - 1]);
        assert_eq!(m.params.flat_collect(), before);
    }

    #[test]
    fn one_hot_linear_encoder_inverts_noiseless_mapping() {
        let mut m = linear_model(5);
        let (d_z, d_x) = (3, 12);
        // W one-hot: cell c belongs to latent c % 3; encoder = W^T.
        if let Tier::Linear { enc_w, enc_b, .. } = &mut m.params.tier {
            enc_w.iter_mut().for_each(|v| *v = 0.0);
            enc_b.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..d_x {
                for i in 0..d_z {
                    m.params.w_map[c * d_z + i] = 0.0;
                }
            }
            for c in 0..d_x {
                let parent = c % d_z;
                m.params.w_map[c * d_z + parent] = 0.5; // fixed below
            }
            // normalize columns so W^T W = I, encoder = W^T inverts x = W z*.
            for i in 0..d_z {
                let norm: f64 = (0..d_x)
                    .map(|c| m.params.w_map[c * d_z + i] * m.params.w_map[c * d_z + i])
                    .sum::<f64>()
                    .sqrt();
                for c in 0..d_x {
                    m.params.w_map[c * d_z + i] /= norm;
                }
            }
            for c in 0..d_x {
                for i in 0..d_z {
                    enc_w[i * d_x + c] = m.params.w_map[c * d_z + i];
                }
            }
        } else {
            unreachable!()
        }
        let z_star = [0.7, -1.2, 0.4];
        let mut x = vec![0.0; d_x];
        for c in 0..d_x {
            for i in 0..d_z {
                x[c] += m.params.w_map[c * d_z + i] * z_star[i];
            }
        }
        let post = encode(&m, &[&x]).unwrap();
        for i in 0..d_z {
            assert!((post.means[i] - z_star[i]).abs() < 1e-12, "latent {i}");
        }
    }

    #[test]
    fn zero_input_zero_bias_encodes_to_zero() {
        let m = linear_model(6);
        let x = vec![0.0; 12];
        let post = encode(&m, &[&x]).unwrap();
        assert!(post.means.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn encode_is_deterministic() {
        for p in [Parameterization::Linear, Parameterization::Shared] {
            let mut rng = RngStream::new(9, 0);
            let m = LatentModel::init(small_arch(p), &mut rng).unwrap();
            let x: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
            let a = encode(&m, &[&x]).unwrap();
            let b = encode(&m, &[&x]).unwrap();
            assert_eq!(a.means, b.means);
        }
    }

    #[test]
    fn encode_rejects_bad_shape() {
        let m = linear_model(2);
        let x = vec![0.0; 11];
        assert!(encode(&m, &[&x]).is_err());
    }

    #[test]
    fn sample_latents_degenerate_variance_returns_mean() {
        let post = Posterior { means: vec![1.0, -2.0, 0.5], steps: 1, vars: vec![0.0; 3] };
        let mut rng = RngStream::new(1, 1);
        let z = sample_latents(&post, &mut rng);
        assert_eq!(z, post.means);
    }

    #[test]
    fn sample_latents_mean_clt_bound() {
        let post = Posterior { means: vec![0.3, -0.7], steps: 1, vars: vec![0.25, 4.0] };
        let mut rng = RngStream::new(8, 0);
        let n = 100_000;
        let mut acc = [0.0f64; 2];
        for _ in 0..n {
            let z = sample_latents(&post, &mut rng);
            acc[0] += z[0];
            acc[1] += z[1];
        }
        for i in 0..2 {
            let mean = acc[i] / n as f64;
            let se = (post.vars[i] / n as f64).sqrt();
            assert!(
                (mean - post.means[i]).abs() < 4.0 * se,
                "latent {i}: {mean} vs {}",
                post.means[i]
            );
        }
    }

    #[test]
    fn sample_latents_reproducible() {
        let post = Posterior { means: vec![0.0; 4], steps: 2, vars: vec![1.0, 1.0] };
        let mut r1 = RngStream::new(3, 7);
        let mut r2 = RngStream::new(3, 7);
        assert_eq!(sample_latents(&post, &mut r1), sample_latents(&post, &mut r2));
    }

    #[test]
    fn graph_marginals_track_sigmoid() {
        let mut m = linear_model(4);
        let n_edges = m.arch.n_edges();
        // Three regimes packed into one gamma vector.
        for e in 0..n_edges {
            m.params.gamma[e] = match e % 3 {
                0 => 20.0,
                1 => 0.0,
                _ => -20.0,
            };
        }
        let mut rng = RngStream::new(5, 0);
        let draws = 10_000;
        let mut counts = vec![0.0; n_edges];
        for _ in 0..draws {
            let g = sample_graph(&m, 1.0, &mut rng, true).unwrap();
            for (c, v) in counts.iter_mut().zip(&g.values) {
                *c += v;
            }
        }
        for e in 0..n_edges {
            let freq = counts[e] / draws as f64;
            match e % 3 {
                0 => assert!(freq > 0.999, "edge {e}: {freq}"),
                1 => assert!((freq - 0.5).abs() < 0.02, "edge {e}: {freq}"),
                _ => assert!(freq < 0.001, "edge {e}: {freq}"),
            }
        }
    }

    #[test]
    fn soft_samples_live_in_unit_interval_and_average_right() {
        let mut m = linear_model(4);
        m.params.gamma.iter_mut().for_each(|g| *g = 0.8);
        let mut rng = RngStream::new(6, 0);
        let draws = 20_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let g = sample_graph(&m, 1.0, &mut rng, false).unwrap();
            assert!(g.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            acc += g.values[0];
        }
        let mean = acc / draws as f64;
        // E[soft gate] equals the hard marginal sigma(gamma) at temperature 1.
        assert!((mean - sigmoid(0.8)).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn transition_zero_graph_zero_bias_gives_zero_mean() {
        let m = linear_model(7);
        let graph = GraphSample {
            values: vec![0.0; m.arch.n_edges()],
            ste: vec![0.0; m.arch.n_edges()],
            hard: true,
        };
        let hist = vec![1.3; m.arch.tau * m.arch.d_z];
        let (mean, var) = transition(&m, &graph, &hist).unwrap();
        assert!(mean.iter().all(|&v| v.abs() < 1e-15));
        assert_eq!(var.len(), 3);
    }

    #[test]
    fn linear_self_edge_reads_the_lagged_value() {
        let mut m = linear_model(8);
        let (tau, d_z) = (m.arch.tau, m.arch.d_z);
        let a = 0.8;
        if let Tier::Linear { trans_w, trans_b, .. } = &mut m.params.tier {
            trans_w.iter_mut().for_each(|v| *v = 0.0);
            trans_b.iter_mut().for_each(|v| *v = 0.0);
            // latent 1 <- latent 1 at lag 2 (k = 1).
            trans_w[(1 * d_z + 1) * d_z + 1] = a;
        }
        let mut values = vec![0.0; m.arch.n_edges()];
        values[(1 * d_z + 1) * d_z + 1] = 1.0;
        let graph = GraphSample { values, ste: vec![0.0; m.arch.n_edges()], hard: true };
        let mut hist = vec![0.0; tau * d_z];
        hist[1] = 2.5; // oldest step (lag 2), latent 1... row 0 is oldest
        let (mean, _) = transition(&m, &graph, &hist).unwrap();
        assert!((mean[1] - a * 2.5).abs() < 1e-15, "mean {:?}", mean);
        assert!(mean[0].abs() < 1e-15 && mean[2].abs() < 1e-15);
    }

    #[test]
    fn masked_history_entries_cannot_affect_transition() {
        // Hard samples: entries whose gates are zero must not matter.
        for p in [Parameterization::Linear, Parameterization::Shared] {
            let mut rng = RngStream::new(11, 0);
            let m = LatentModel::init(small_arch(p), &mut rng).unwrap();
            let n_edges = m.arch.n_edges();
            let mut values = vec![0.0; n_edges];
            for (e, v) in values.iter_mut().enumerate() {
                *v = if e % 2 == 0 { 1.0 } else { 0.0 };
            }
            let graph = GraphSample { values, ste: vec![0.0; n_edges], hard: true };
            let (tau, d_z) = (m.arch.tau, m.arch.d_z);
            let hist: Vec<f64> = (0..tau * d_z).map(|_| rng.normal()).collect();
            let (base, _) = transition(&m, &graph, &hist).unwrap();
            // Find a (step, latent) pair whose gates are all zero.
            'outer: for srow in 0..tau {
                let k = tau - 1 - srow;
                for j in 0..d_z {
                    let masked_everywhere =
                        (0..d_z).all(|i| graph.values[(k * d_z + i) * d_z + j] == 0.0);
                    if masked_everywhere {
                        let mut hist2 = hist.clone();
                        hist2[srow * d_z + j] += 123.0;
                        let (changed, _) = transition(&m, &graph, &hist2).unwrap();
                        assert_eq!(base, changed, "{p:?}");
                        break 'outer;
                    }
                }
            }
        }
    }

    #[test]
    fn decode_zero_latent_zero_bias_is_zero() {
        let m = linear_model(12);
        let (mean, var) = decode(&m, &[0.0, 0.0, 0.0]).unwrap();
        assert!(mean.iter().all(|&v| v.abs() < 1e-15));
        assert_eq!(var.len(), 12);
    }

    #[test]
    fn one_hot_rows_make_single_parent_cells() {
        let mut m = linear_model(13);
        let (d_z, d_x) = (3, 12);
        m.params.w_map.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..d_x {
            m.params.w_map[c * d_z + (c % d_z)] = 1.0;
        }
        let z = [0.5, -1.5, 2.0];
        let (mean, _) = decode(&m, &z).unwrap();
        let mut z2 = z;
        z2[1] += 10.0;
        let (mean2, _) = decode(&m, &z2).unwrap();
        for c in 0..d_x {
            if c % d_z == 1 {
                assert!((mean2[c] - mean[c]).abs() > 1.0);
            } else {
                assert_eq!(mean2[c], mean[c], "cell {c} should not move");
            }
        }
    }

    #[test]
    fn linear_decoder_is_linear() {
        let m = linear_model(14);
        let z = [0.3, 0.9, -0.2];
        let z2: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        let zero = [0.0; 3];
        let (m1, _) = decode(&m, &z).unwrap();
        let (m2, _) = decode(&m, &z2).unwrap();
        let (m0, _) = decode(&m, &zero).unwrap();
        for c in 0..12 {
            let lhs = m2[c] - m0[c];
            let rhs = 2.0 * (m1[c] - m0[c]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
