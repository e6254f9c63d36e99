//! Deterministic numerical substrate: seeded RNG substreams, power spectra,
//! closed-form densities and scores, and a finite-difference oracle.

mod grad;
mod rng;
mod spectrum;
mod stats;

pub use grad::{finite_diff_grad, grad_relative_error, DEFAULT_FD_EPS};
pub use rng::{substream_id, RngStream};
pub use spectrum::{
    n_radial_bins, spatial_power_spectrum, temporal_power_spectrum, PowerSpectrum,
    SpatialSpectrumPlan,
};
pub use stats::{beta_sample, crps_ensemble, gaussian_kl, laplace_logpdf};
