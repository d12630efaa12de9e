//! Scenes shared by the benchmarks.

use softtwin_core::material::{MaterialBounds, MaterialField};
use softtwin_core::math::Vec3;
use softtwin_core::mpm::{Category, ParticleState, SimConfig};
use softtwin_core::rollout::Model;

/// Volumetric block of `side × side × (side - 1)` particles at half-cell
/// spacing, centered over the floor, with up to 64 material patches.
pub fn block(side: usize) -> (Model, ParticleState) {
    let h = 1.0 / 64.0;
    let x0 = 0.5 - 0.5 * h * side as f64;
    let mut rest = Vec::with_capacity(side * side * side);
    for i in 0..side {
        for j in 0..side {
            for k in 0..side - 1 {
                rest.push(Vec3::new(
                    x0 + h * i as f64,
                    x0 + h * j as f64,
                    0.06 + h * k as f64,
                ));
            }
        }
    }
    let sim = SimConfig::for_category(Category::Volumetric);
    let field = MaterialField::init_patches(
        &rest,
        64.min(rest.len()),
        MaterialBounds::for_category(Category::Volumetric),
    )
    .expect("block patches");
    let state = ParticleState::at_rest(rest, h * h * h, sim.density).expect("block state");
    (Model::new(sim, field), state)
}

/// The 10 164-particle block used for throughput numbers.
pub fn desk_block() -> (Model, ParticleState) {
    block(22)
}
