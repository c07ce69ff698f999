//! Pre-train a GRU language model, transfer its prefix encoder (embedding +
//! GRU) into a merge-architecture caption generator, and evaluate the result.

pub mod capgen;
pub mod encoder;
pub mod error;
pub mod hyperopt;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod text;
pub mod train;

pub use error::{Error, Result};
