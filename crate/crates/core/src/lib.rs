//! Advantageous parameter expansion for a toy GLU transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, kernels and a reverse-mode tape.
//! - [`model`]: the decoder-only transformer with activation probes.
//! - [`assessment`]: Top-K/Min-K advantage scoring and component masking.
//! - [`expansion`]: zero-initialised Monarch expansion operators and fusion.
//! - [`staging`]: optimizer, trainability masks and the stage loop.
//! - [`analysis`]: Jacobi SVD and effective-rank diagnostics.
//! - [`harness`]: corpus, checkpoints, configuration and the CLI.

pub mod analysis;
pub mod assessment;
pub mod error;
pub mod expansion;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod staging;

pub use error::{ApexError, Result};
