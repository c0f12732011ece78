//! Confounder-conditional mean and covariance estimation by kernel smoothing.
//!
//! The crate fits `m̂(z)` and `Σ̂(z)` from multivariate outputs observed together
//! with a scalar confounder `z` (typically temperature), tunes bandwidths by
//! validation loss, and builds conditional Mahalanobis diagnostics and
//! conditional PCA on top of the fitted models. [`simgen`] generates synthetic
//! data with known ground truth.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandwidth;
pub mod condcov;
pub mod cpca;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod export;
pub mod kernel_mean;
pub mod simgen;
mod smoothing;

pub use error::{Error, Result};
pub use smoothing::MASS_FLOOR_EPS;
