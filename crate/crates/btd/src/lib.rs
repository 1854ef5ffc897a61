//! Bundle-specific tractogram distribution (BTD) tractography.
//!
//! Fits an n-th order polynomial 3-vector field to per-voxel fiber peak
//! directions inside a bundle mask under a divergence-free constraint, then
//! integrates streamlines through the fitted field with a fourth-order
//! Runge-Kutta scheme. Ships with synthetic phantoms (fan, sine, circle), a
//! tensor-model DWI simulator with Rician noise, a DTI peak extractor, a
//! deterministic peak-following baseline tracker, tractogram evaluation
//! metrics, and self-contained file formats.

// `!(x > 0.0)` is used for validation on purpose: unlike `x <= 0.0` it also
// rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod formats;
pub mod grid;
pub mod metrics;
pub mod phantom;
pub mod polyfield;
pub mod tracer;

pub use error::{Error, Result};
