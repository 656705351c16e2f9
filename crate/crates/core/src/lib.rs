//! Attention-based multiple instance learning with attention entropy
//! regularization.
//!
//! Dense `f64` math with hand-written backward passes ([`tensor`]), three
//! attention aggregators ([`model`]), cross-entropy with entropy and KL
//! attention regularizers ([`objectives`]), Adam with cosine schedules
//! ([`optim`]), bag data handling ([`data`]) and evaluation metrics
//! ([`metrics`]).

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod step;
pub mod tensor;

pub use error::{Error, Result};
