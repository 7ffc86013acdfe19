//! File formats, the training and evaluation pipeline, and benchmarks built
//! on `overfill-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csvlog;
pub mod dataset;
pub mod error;
pub mod pipeline;

pub use error::{Error, Result};
pub use overfill_core as core;
