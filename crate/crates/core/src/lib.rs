//! Differentially private LoRA fine-tuning for multi-label report
//! classification, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod corpus;
pub mod dp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod per_sample;
pub mod probe;
pub mod rng;
pub mod runner;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
