//! Experiment orchestration for hmnas: configuration, dataset files,
//! checkpoints, metrics, the stage pipeline, ablations and the gradient-check suite.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod pipeline;

pub use error::{CliError, Result};
