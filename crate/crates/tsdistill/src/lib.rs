//! Self-distillation pretraining for time series, with linear probes for
//! classification and forecasting on top of the learned representations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod rngutil;

pub use error::{Error, Result};

/// Element type used throughout training. f32 keeps the memory footprint of
/// activations and checkpoints half of f64; gradient checks run in f64 at
/// the engine level where precision matters.
pub type Real = f32;
