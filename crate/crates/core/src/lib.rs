//! Desk-scale diffusion laboratory for Gaussian-mixture data.
//!
//! Exact mixture posteriors of the forward process, vanilla and soft-mixture
//! denoisers trained with a from-scratch reverse-mode MLP, ancestral samplers,
//! and estimators of local and global denoising error.

pub mod denoiser;
pub mod error;
pub mod forward;
pub mod gmm;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
