//! Differentiable physics world model for deformable objects.

// `!(x > 0.0)` rejects NaN on purpose; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod actuation;
pub mod checkpoint;
pub mod error;
pub mod material;
pub mod math;
pub mod mpm;
pub mod playground;
pub mod residual;
pub mod rollout;
pub mod scenario;
pub mod skinning;
pub mod training;

pub use error::{Error, Result};
