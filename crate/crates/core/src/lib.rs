//! Set-aware latent endpoint transport for single-cell perturbation prediction.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndmath`]: dense tensors, a reverse-mode tape, layers and the optimizer.
//! - [`setenc`]: the hierarchical set encoder/decoder and the MSE + MMD objective.
//! - [`transport`]: condition tokens, the conditional backbone and the
//!   endpoint/displacement prediction family, plus generation.
//! - [`celleval`]: pseudobulk and differential-expression metrics.
//! - [`datastore`]: condition-sharded sparse storage, preprocessing, sampling and
//!   the planted-effect generator.
//! - [`pipeline`]: the synth → train → generate → eval → report workflow used by the CLI.

// Validation writes `!(x >= 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod celleval;
pub mod config;
pub mod datastore;
mod error;
pub mod model;
pub mod ndmath;
pub mod pipeline;
pub mod setenc;
pub mod transport;

pub use error::{Error, Result};
