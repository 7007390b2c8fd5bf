//! Desk-scale domain-expert pipeline for a conditional denoising-diffusion
//! model: prompt-bank synthesis and filtering, per-domain low-rank adapter
//! training, factor-wise expert merging, and distribution-trust metrics.

pub mod diffusion;
pub mod domain;
pub mod error;
pub mod experts;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod promptbank;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{GaussianStats, Matrix};
pub use rng::SeededRng;
