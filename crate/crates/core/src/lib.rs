//! Structured pruning of 3D CNNs and a sparse 3D-convolution engine.

pub mod compile;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod io;
pub mod pruning;
pub mod sparsity;
pub mod tensor;
pub mod train;
pub mod tuner;

pub use error::{Error, Result};
