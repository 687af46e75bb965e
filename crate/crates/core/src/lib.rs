//! Cooperative generator/predictor rationalization on synthetic text.
//!
//! A generator picks a binary token mask, a predictor classifies the masked
//! input, and both are trained on the predictor's cross-entropy plus a
//! sparsity/continuity penalty. On top of the plain joint game, a scheduler
//! periodically runs a three-phase freeze/update intervention (predictor
//! only, generator only, then both) and logs critic/advantage diagnostics.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod porat;
pub mod rationalization;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
