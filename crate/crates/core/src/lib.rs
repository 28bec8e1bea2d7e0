//! Differentiable architecture search with multi-level (operation + edge)
//! architecture encoding, hierarchical binary masking and warm-started
//! fine-tuning.

pub mod data;
pub mod derive;
pub mod error;
pub mod finetune;
pub mod masker;
pub mod numcore;
pub mod optim;
pub mod searchspace;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
