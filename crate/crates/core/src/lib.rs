//! Conformalized multi-hypothesis 3D pose lifting.
//!
//! A diffusion denoiser lifts 2D keypoint sequences to 3D pose hypotheses, a
//! learned conformity score ranks them, and split conformal prediction keeps
//! the hypotheses that score above a calibrated threshold before aggregation.

// `!(x > 0.0)` style guards reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod conformal;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ndgrad;
pub mod pipeline;
pub mod pose;
pub mod posenet;
pub mod rng;
pub mod scorer;
pub mod synthkin;
pub mod trainer;

pub use error::{Error, Result};
