//! Distributed compliant actuation: spring-damper couplings from actuator
//! anchors to every particle within a binding radius, normalized by
//! `n_p^(-1/2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mpm::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcaGains {
    /// Stiffness, 1/s².
    pub kp: f64,
    /// Damping, 1/s.
    pub kd: f64,
}

impl Default for DcaGains {
    fn default() -> Self {
        DcaGains { kp: 1e3, kd: 30.0 }
    }
}

impl DcaGains {
    pub fn validate(&self) -> Result<()> {
        if self.kp > 0.0 && self.kd > 0.0 && self.kp.is_finite() && self.kd.is_finite() {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "DCA gains must be positive, got kp = {}, kd = {}",
                self.kp, self.kd
            )))
        }
    }
}

/// Default binding radius: two cells of a 32³ grid over the unit cube.
pub const DEFAULT_BINDING_RADIUS: f64 = 2.0 / 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub anchor: usize,
    /// `x_c(0) - x_p(0)`.
    pub rest_offset: Vec3,
}

/// Fixed per-particle coupling lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorBinding {
    pub radius: f64,
    pub couplings: Vec<Vec<Coupling>>,
}

impl ActuatorBinding {
    /// No particle coupled to anything.
    pub fn empty(particles: usize) -> Self {
        ActuatorBinding {
            radius: DEFAULT_BINDING_RADIUS,
            couplings: vec![Vec::new(); particles],
        }
    }

    pub fn coupled_particles(&self) -> usize {
        self.couplings.iter().filter(|c| !c.is_empty()).count()
    }
}

/// Couples each particle to every anchor within `radius` of it.
pub fn bind_actuators(
    positions: &[Vec3],
    anchors: &[Vec3],
    radius: f64,
) -> Result<ActuatorBinding> {
    if !(radius > 0.0) {
        return Err(Error::arg(format!(
            "binding radius must be positive, got {radius}"
        )));
    }
    let r2 = radius * radius;
    let couplings = positions
        .iter()
        .map(|x| {
            anchors
                .iter()
                .enumerate()
                .filter(|(_, a)| (*a - x).norm_squared() <= r2)
                .map(|(anchor, a)| Coupling {
                    anchor,
                    rest_offset: a - x,
                })
                .collect()
        })
        .collect();
    Ok(ActuatorBinding { radius, couplings })
}

/// Anchor positions and velocities at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

/// `a_p = n_p^(-1/2) Σ_c [k_p((x_c - x_p) - o_pc) + k_d(v_c - v_p)]`.
pub fn dca_acceleration(
    binding: &ActuatorBinding,
    gains: DcaGains,
    x: &[Vec3],
    v: &[Vec3],
    anchors: &AnchorState,
) -> Vec<Vec3> {
    binding
        .couplings
        .iter()
        .enumerate()
        .map(|(p, list)| {
            if list.is_empty() {
                return Vec3::zeros();
            }
            let sum: Vec3 = list
                .iter()
                .map(|c| {
                    gains.kp * ((anchors.positions[c.anchor] - x[p]) - c.rest_offset)
                        + gains.kd * (anchors.velocities[c.anchor] - v[p])
                })
                .sum();
            sum / (list.len() as f64).sqrt()
        })
        .collect()
}

/// Anchor positions at the start and end of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAction {
    pub start: Vec<Vec3>,
    pub end: Vec<Vec3>,
}

impl FrameAction {
    pub fn stationary(anchors: Vec<Vec3>) -> Self {
        FrameAction {
            end: anchors.clone(),
            start: anchors,
        }
    }

    /// Linear position interpolation with the frame's finite-difference
    /// velocity held constant.
    pub fn at_substep(&self, substep: usize, cfg: &SimConfig) -> AnchorState {
        let t = substep as f64 / cfg.substeps_per_frame as f64;
        AnchorState {
            positions: self
                .start
                .iter()
                .zip(&self.end)
                .map(|(a, b)| a + (b - a) * t)
                .collect(),
            velocities: self
                .start
                .iter()
                .zip(&self.end)
                .map(|(a, b)| (b - a) / cfg.frame_dt)
                .collect(),
        }
    }
}

/// Anchor trajectories with their particle couplings. Gains belong to
/// the fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorSet {
    /// `[frame][anchor]` positions.
    pub trajectory: Vec<Vec<Vec3>>,
    pub binding: ActuatorBinding,
}

impl ActuatorSet {
    /// Binds against the particles at frame 0.
    pub fn new(positions: &[Vec3], trajectory: Vec<Vec<Vec3>>, radius: f64) -> Result<Self> {
        let first = trajectory.first().map(Vec::as_slice).unwrap_or(&[]);
        let binding = bind_actuators(positions, first, radius)?;
        Ok(ActuatorSet {
            trajectory,
            binding,
        })
    }

    pub fn frames(&self) -> usize {
        self.trajectory.len()
    }

    /// Action driving the transition from frame `t` to `t + 1`.
    pub fn frame_action(&self, t: usize) -> FrameAction {
        let last = self.trajectory.len().saturating_sub(1);
        FrameAction {
            start: self.trajectory[t.min(last)].clone(),
            end: self.trajectory[(t + 1).min(last)].clone(),
        }
    }
}

/// How actuator anchors act on their coupled particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    #[default]
    Compliant,
    /// Hard velocity constraint: after each substep coupled particles move
    /// with the mean velocity of their anchors, whatever the grid says.
    Rigid,
}

/// Body force outside the learnable model, used to inject dynamics
/// mismatch into teacher rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExternalForce {
    #[default]
    None,
    /// `a = -c ⊙ v`, per-axis rates in 1/s.
    AnisotropicDrag { rates: [f64; 3] },
    /// Constant acceleration, m/s².
    Constant { acceleration: [f64; 3] },
}

/// Per-particle affine velocity map applied before the scatter:
/// `v' = cv ⊙ v + cx ⊙ x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityUpdate {
    pub cv: Vec3,
    pub cx: Vec3,
    pub b: Vec3,
}

impl VelocityUpdate {
    pub const IDENTITY: VelocityUpdate = VelocityUpdate {
        cv: Vec3::new(1.0, 1.0, 1.0),
        cx: Vec3::new(0.0, 0.0, 0.0),
        b: Vec3::new(0.0, 0.0, 0.0),
    };

    #[inline]
    pub fn apply(&self, x: &Vec3, v: &Vec3) -> Vec3 {
        self.cv.component_mul(v) + self.cx.component_mul(x) + self.b
    }
}

/// Everything that forces particles during one frame besides stress and
/// gravity.
#[derive(Debug, Clone, Copy)]
pub struct Drive<'a> {
    pub actuators: Option<(&'a ActuatorBinding, DcaGains, &'a FrameAction)>,
    pub mode: CouplingMode,
    pub external: ExternalForce,
}

impl<'a> Drive<'a> {
    pub fn none() -> Self {
        Drive {
            actuators: None,
            mode: CouplingMode::Compliant,
            external: ExternalForce::None,
        }
    }

    pub fn compliant(
        binding: &'a ActuatorBinding,
        gains: DcaGains,
        action: &'a FrameAction,
    ) -> Self {
        Drive {
            actuators: Some((binding, gains, action)),
            mode: CouplingMode::Compliant,
            external: ExternalForce::None,
        }
    }

    pub fn with_external(mut self, external: ExternalForce) -> Self {
        self.external = external;
        self
    }

    pub fn with_mode(mut self, mode: CouplingMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn substep(&self, substep: usize, cfg: &SimConfig) -> SubstepDrive<'a> {
        SubstepDrive {
            actuators: self
                .actuators
                .map(|(b, g, a)| (b, g, a.at_substep(substep, cfg))),
            mode: self.mode,
            external: self.external,
            dt: cfg.substep_dt,
        }
    }
}

/// [`Drive`] resolved at one substep.
pub struct SubstepDrive<'a> {
    actuators: Option<(&'a ActuatorBinding, DcaGains, AnchorState)>,
    mode: CouplingMode,
    external: ExternalForce,
    dt: f64,
}

impl SubstepDrive<'_> {
    /// Anchor velocity a rigidly coupled particle is held to, applied after
    /// the grid gather; `None` for free particles and compliant coupling.
    pub fn pinned_velocity(&self, p: usize) -> Option<Vec3> {
        if self.mode != CouplingMode::Rigid {
            return None;
        }
        let (binding, _, anchors) = self.actuators.as_ref()?;
        let list = &binding.couplings[p];
        if list.is_empty() {
            return None;
        }
        Some(
            list.iter()
                .map(|c| anchors.velocities[c.anchor])
                .sum::<Vec3>()
                / list.len() as f64,
        )
    }

    pub fn update(&self, p: usize) -> VelocityUpdate {
        let dt = self.dt;
        let mut u = VelocityUpdate::IDENTITY;
        match self.external {
            ExternalForce::None => {}
            ExternalForce::AnisotropicDrag { rates } => {
                u.cv -= Vec3::from(rates) * dt;
            }
            ExternalForce::Constant { acceleration } => {
                u.b += Vec3::from(acceleration) * dt;
            }
        }
        let Some((binding, gains, anchors)) = &self.actuators else {
            return u;
        };
        let list = &binding.couplings[p];
        if list.is_empty() {
            return u;
        }
        if self.mode == CouplingMode::Rigid {
            return u;
        }
        let n = list.len() as f64;
        let mut sum_x = Vec3::zeros();
        let mut sum_v = Vec3::zeros();
        for c in list {
            sum_x += anchors.positions[c.anchor] - c.rest_offset;
            sum_v += anchors.velocities[c.anchor];
        }
        // Spring explicit, damper implicit in the new velocity, so large
        // `kd` cannot flip the sign of the velocity.
        let sqrt_n = n.sqrt();
        let s = 1.0 / (1.0 + dt * gains.kd * sqrt_n);
        u.cv *= s;
        u.cx = Vec3::repeat(-dt * gains.kp * sqrt_n * s);
        u.b = (u.b + (gains.kp * sum_x + gains.kd * sum_v) * (dt / sqrt_n)) * s;
        u
    }
}
