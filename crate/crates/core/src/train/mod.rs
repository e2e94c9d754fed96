//! Dataset assembly, float training, cross-validation and grid search.

mod cv;
mod dataset;
mod mlp;

pub use cv::*;
pub use dataset::*;
pub use mlp::*;
