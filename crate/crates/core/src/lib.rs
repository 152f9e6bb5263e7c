//! Doctor-referral recommendation as extreme multilabel classification.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod features;
pub mod labels;
pub mod metrics;
pub mod model_io;
pub mod ranking;
pub mod sparse;
pub mod synthgen;
pub mod xmlc;

pub use error::{Error, Result};
