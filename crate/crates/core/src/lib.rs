//! Hierarchical differentiable architecture search for dense prediction.
//!
//! The crate models a two-level search space (a repeated cell DAG and a
//! network-level trellis over downsample factors 4..32), relaxes it into a
//! differentiable supernet, searches it with alternating first-order
//! updates on synthetic segmentation data, and decodes, validates and
//! measures the resulting discrete architectures.

pub mod analytics;
pub mod decoder;
pub mod error;
pub mod microtensor;
pub mod relaxation;
pub mod search_space;
pub mod segsearch;

pub use error::{Error, Result};
