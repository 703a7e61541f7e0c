//! Conjugate energy-based models at desk scale.
//!
//! The library couples an exponential-family latent bias with a learned
//! encoder so that the posterior over latents stays closed-form while the
//! marginal over inputs is a trainable energy-based model. Modules:
//!
//! - [`expfam`]: Gaussian natural/mean parameterizations, log normalizers,
//!   Legendre maps, Bregman divergences, conjugate posterior algebra.
//! - [`autodiff`]: a minimal reverse-mode tape over dense f64 tensors.
//! - [`model`]: encoder definitions and the joint/marginal energies, plus a
//!   Gaussian-mixture latent variant and an unconditional baseline.
//! - [`sampler`]: Langevin dynamics over inputs and the persistent replay
//!   buffer.
//! - [`trainer`]: persistent contrastive divergence with Adam.
//! - [`eval`]: representation metrics (k-NN, OOD scores, few-label probes,
//!   posterior-collapse diagnostics).
//! - [`dataio`]: datasets, synthetic generators, IDX loading, checkpoints,
//!   and image export.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod expfam;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
pub use expfam::{GaussianMeanParams, GaussianNaturalParams};
