//! Bounded neural velocity correction applied once per frame.

mod config;
mod fourier;
mod net;
mod params;

pub use config::ResidualConfig;
pub use fourier::{fourier_encode, NodeEncoding};
pub use net::{
    apply_correction, gather_correction, InputGrads, KinematicHistory, Kinematics, ResidualInputs,
    ResidualNet,
};
pub use params::{ResidualParams, TensorSpec, PARAMS_FORMAT_VERSION};
