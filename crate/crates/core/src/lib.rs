//! Asynchronous flow-matching inference.
//!
//! A flow-matching sampler integrates a learned velocity field from noise to
//! data on a fixed time grid. Here the time at which the field is *queried*
//! may drift away from the grid: a small transformer, the timestep predictor,
//! reads the sampler state and emits a Beta distribution over a ratio that
//! sets the next query time, while the latent update keeps using the grid
//! spacing. The predictor is trained with group-relative policy optimization
//! against a composite of normalized reward metrics.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod flow;
pub mod grpo;
pub mod nn;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod tpm;

pub use error::{Error, Result};
