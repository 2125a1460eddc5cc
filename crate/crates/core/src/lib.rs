//! Collaborative two-branch clustering of an unlabeled target domain.
//!
//! A domain-shared branch learns from labeled source data, a
//! target-specific branch learns by instance discrimination on the target
//! data, and both are refined by teacher-student online clustering with
//! balanced optimal-transport pseudo labels plus a pairwise co-training
//! loss that exchanges "same cluster / different cluster" relations across
//! branches.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the `f64` instantiation used by the trainer and CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pseudo_label;
pub mod scalar;
pub mod sinkhorn;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type RealMatrix = numerics::Matrix<f64>;
pub type Predictions = numerics::PredictionMatrix<f64>;
pub type Assignment = sinkhorn::SoftAssignment<f64>;
