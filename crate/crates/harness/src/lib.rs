//! Experiment harness: configuration, training runs, checkpoints, λ sweeps
//! and the entropy/AUC correlation study.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod seeds;
pub mod train;

pub use error::{HarnessError, Result};
