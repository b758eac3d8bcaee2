//! Multi-level class-grouping class activation maps.
//!
//! Categories are clustered level by level from classifier head weights,
//! each level trains a two-branch classifier coupled by a feature-orthogonal
//! loss, and the per-level Grad-CAMs are fused into one map per category.

pub mod cam;
pub mod classifier;
pub mod container;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod nn;
pub mod pipeline;
mod seed;

pub use error::{Error, Result};
pub use seed::derive_seed;
