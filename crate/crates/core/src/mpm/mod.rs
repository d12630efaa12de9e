//! Differentiable MLS-MPM on a uniform grid over the unit cube.

mod config;
mod frame;
mod grid;
mod kernel;
mod state;
mod substep;

pub use config::{Category, SimConfig};
pub use frame::FrameRecord;
pub use grid::{
    clamp_singular_values, clamp_singular_values_vjp, g2p, grid_update, p2g, GridField,
};
pub use kernel::{kernel_weights, NodeWeight, Stencil};
pub use state::ParticleState;
pub use substep::{Solver, StateAdjoint};
