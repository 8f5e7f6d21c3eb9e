//! Structured channel pruning for 1D-convolutional source-separation models.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod data;
pub mod model;
pub mod profiler;
pub mod pruner;
pub mod train;

pub use error::{Error, Result};
