//! Easy consistency tuning (ECT) and easy consistency distillation (ECD) on
//! low-dimensional data, checked against an analytic Gaussian world in which
//! the score, denoiser, probability-flow trajectory and consistency map all
//! have closed forms.
//!
//! Module map:
//!
//! - [`nnkit`]: time-conditioned MLP, hand-written backprop, finite-difference oracle
//! - [`schedule`]: noise-level sampling, the `r = m(t, iters)` mapping, iCT baselines
//! - [`weighting`]: timestep weights, adaptive weights, pseudo-Huber
//! - [`cmodel`]: `c_skip`/`c_out` parameterization around a raw network
//! - [`oracle`]: closed-form Gaussian world and the Monte-Carlo score estimator
//! - [`trainer`]: the tuning loop, Adam, EMA
//! - [`distill`]: teacher ODE steps and (data-free) distillation
//! - [`sampling`]: few-step consistency sampling and the diffusion baseline
//! - [`eval`]: sample metrics, power-law fit, curse-of-consistency and flow toy experiments
//! - [`store`]: datasets, checkpoints, tensor files, JSONL logs

pub mod batch;
pub mod cmodel;
pub mod distill;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nnkit;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod store;
pub mod trainer;
pub mod weighting;

pub use batch::Batch;
pub use error::{Error, Result};
