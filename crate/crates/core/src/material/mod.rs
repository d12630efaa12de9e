//! Spatially varying mixture of hyperelastic experts with patch-level
//! learnable parameters.

mod bounded;
mod experts;
mod field;

pub use bounded::{bounded_linear, bounded_linear_grad, bounded_log, bounded_log_grad, sigmoid};
pub use experts::{
    expert_stress, mixed_stress, mixed_stress_vjp, Expert, Lame, ParticleMaterial,
    ParticleMaterialGrad,
};
pub use field::{
    farthest_point_sampling, inverse_distance_weights, one_hot_logits, MaterialBounds,
    MaterialField, MaterialGrads, PatchBinding, DEFAULT_PATCH_COUNT,
};
