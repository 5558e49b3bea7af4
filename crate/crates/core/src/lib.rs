//! Test-time training with mutual-information clustering heads.
//!
//! A small CNN is trained jointly on a supervised cross-entropy objective
//! and on a set of clustering projectors that maximise the mutual
//! information between feature-map positions and soft cluster assignments.
//! At test time each unlabeled batch adapts the early extractor blocks by
//! the same information objective, then the source weights are restored.

pub mod adapt;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::optim::{AdamHyper, Optimizer, Parameter, SgdHyper};
pub use tensor::{DType, Scalar, Tensor};
