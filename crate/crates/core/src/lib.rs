//! Spike detection and classification for a wireless Purkinje-cell
//! recording head stage: signal synthesis, NEO detection, int8 MLP
//! classification, compact event storage and the offline toolchain that
//! trains and evaluates the classifier.

pub mod analysis;
pub mod detector;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod signal;
pub mod store;
pub mod train;

pub use error::{Error, Result};
