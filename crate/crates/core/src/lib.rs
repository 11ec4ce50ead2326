//! Noisy unimodal maps observed through heteroscedastic noise: simulation,
//! Ulam discretization of the transfer operator, nonlinear filtering with cone
//! contraction diagnostics, limit-law statistics and extreme-value tools.

pub mod error;
pub mod evt;
pub mod filter;
pub mod grid;
pub mod model;
pub mod operator;
pub mod quadrature;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
pub use grid::{Grid, GridDensity};
pub use model::{
    eval_a, eval_g, eval_kernel_p, eval_likelihood, eval_t, validate_config, DynNoise, Geometry,
    Interval, MapKind, MapParams, ModelConfig, ObsNoise, PsiKind, StateFn, ValidationReport,
};
pub use operator::{build_ulam, stationary_density, KernelMatrix, SpectralReport};
pub use simulate::{simulate, InitialState, SeededStream, Trajectory};
