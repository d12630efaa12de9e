use serde::{Deserialize, Serialize};

use crate::actuation::{DcaGains, ExternalForce, DEFAULT_BINDING_RADIUS};
use crate::error::{Error, Result};
use crate::material::{Expert, MaterialField, DEFAULT_PATCH_COUNT};
use crate::mpm::{Category, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    /// Particle chain along x with a square cross-section.
    Rope,
    /// Sheet in the xy plane, three particles thick.
    Cloth,
    /// Filled box.
    Box,
    /// Filled ball; `size[0]` is the diameter.
    Sphere,
}

impl ObjectKind {
    pub fn category(self) -> Category {
        match self {
            ObjectKind::Rope => Category::Linear,
            ObjectKind::Cloth => Category::Planar,
            ObjectKind::Box | ObjectKind::Sphere => Category::Volumetric,
        }
    }

    pub fn default_size(self) -> [f64; 3] {
        match self {
            ObjectKind::Rope => [0.4, 0.03, 0.03],
            ObjectKind::Cloth => [0.3, 0.3, 0.03],
            ObjectKind::Box => [0.16, 0.16, 0.12],
            ObjectKind::Sphere => [0.16, 0.16, 0.16],
        }
    }
}

impl std::str::FromStr for ObjectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rope" => Ok(ObjectKind::Rope),
            "cloth" => Ok(ObjectKind::Cloth),
            "box" => Ok(ObjectKind::Box),
            "sphere" => Ok(ObjectKind::Sphere),
            other => Err(Error::arg(format!("unknown object kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptKind {
    /// Anchors rise linearly, then hold.
    Lift,
    /// Anchors move along +x linearly, then hold.
    Drag,
    /// Anchors press down and come back.
    Poke,
    /// Anchors oscillate along y for the whole sequence.
    Shake,
}

impl std::str::FromStr for ScriptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lift" => Ok(ScriptKind::Lift),
            "drag" => Ok(ScriptKind::Drag),
            "poke" => Ok(ScriptKind::Poke),
            "shake" => Ok(ScriptKind::Shake),
            other => Err(Error::arg(format!("unknown actuator script `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorScript {
    pub kind: ScriptKind,
    /// Peak anchor displacement, meters.
    pub amplitude: f64,
    /// Frames over which the motion plays out; shake uses it as the period.
    pub duration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    None,
    /// Velocity drag with per-axis rates `magnitude * (1, 0.5, 0.25)`.
    Drag,
    /// Constant +y acceleration of `magnitude` m/s².
    SideForce,
}

impl std::str::FromStr for MismatchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MismatchKind::None),
            "drag" => Ok(MismatchKind::Drag),
            "side_force" | "side-force" => Ok(MismatchKind::SideForce),
            other => Err(Error::arg(format!("unknown mismatch `{other}`"))),
        }
    }
}

/// Dynamics the learnable model cannot represent, injected into the
/// teacher rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub kind: MismatchKind,
    pub magnitude: f64,
}

impl Mismatch {
    pub const NONE: Mismatch = Mismatch {
        kind: MismatchKind::None,
        magnitude: 0.0,
    };

    pub fn force(&self) -> ExternalForce {
        let m = self.magnitude;
        match self.kind {
            MismatchKind::None => ExternalForce::None,
            MismatchKind::Drag => ExternalForce::AnisotropicDrag {
                rates: [m, 0.5 * m, 0.25 * m],
            },
            MismatchKind::SideForce => ExternalForce::Constant {
                acceleration: [0.0, m, 0.0],
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    /// Pa.
    pub youngs: f64,
    pub poisson: f64,
    pub expert: Expert,
}

/// Ground-truth constitutive layout of the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum TeacherMaterials {
    Uniform {
        material: MaterialSpec,
    },
    /// Patches left of the object's center plane `x = center[0]` take
    /// `left`, the rest `right`.
    SplitX {
        left: MaterialSpec,
        right: MaterialSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ObjectKind,
    /// Object extents, meters.
    pub size: [f64; 3],
    /// Lattice spacing between particles, meters.
    pub spacing: f64,
    /// Horizontal center of the object; it rests just above the floor.
    pub center: [f64; 2],
    pub frames: usize,
    pub script: ActuatorScript,
    pub mismatch: Mismatch,
    pub teacher: TeacherMaterials,
    pub gains: DcaGains,
    /// Actuator coupling radius, meters.
    pub binding_radius: f64,
    pub patches: usize,
    pub tracks: usize,
    /// Standard deviation of the isotropic noise on target points, meters.
    pub noise_sigma: f64,
    /// Appearance points synthesized per material particle; 0 omits the group.
    pub appearance_per_particle: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec::for_kind(ObjectKind::Cloth)
    }
}

impl ScenarioSpec {
    pub fn for_kind(kind: ObjectKind) -> Self {
        let (script, expert) = match kind {
            ObjectKind::Rope => (ScriptKind::Lift, Expert::Corotated),
            ObjectKind::Cloth => (ScriptKind::Lift, Expert::NeoHookean),
            ObjectKind::Box => (ScriptKind::Poke, Expert::NeoHookean),
            ObjectKind::Sphere => (ScriptKind::Drag, Expert::NeoHookean),
        };
        let youngs = match kind.category() {
            Category::Volumetric => 1e6,
            _ => 1e5,
        };
        let amplitude = match script {
            ScriptKind::Poke => 0.03,
            _ => 0.12,
        };
        ScenarioSpec {
            kind,
            size: kind.default_size(),
            spacing: 1.0 / 64.0,
            center: [0.5, 0.5],
            frames: 30,
            script: ActuatorScript {
                kind: script,
                amplitude,
                duration: 30,
            },
            mismatch: Mismatch::NONE,
            teacher: TeacherMaterials::Uniform {
                material: MaterialSpec {
                    youngs,
                    poisson: 0.3,
                    expert,
                },
            },
            gains: DcaGains::default(),
            binding_radius: DEFAULT_BINDING_RADIUS,
            patches: DEFAULT_PATCH_COUNT,
            tracks: 64,
            noise_sigma: 1e-3,
            appearance_per_particle: 0,
        }
    }

    pub fn category(&self) -> Category {
        self.kind.category()
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig::for_category(self.category())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::arg(m));
        if !self.size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return fail("object size must be positive".into());
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return fail("particle spacing must be positive".into());
        }
        if self.size.iter().any(|s| *s < self.spacing) {
            return fail("object size must span at least one particle spacing".into());
        }
        if self.frames < 2 {
            return fail("a scenario needs at least two frames".into());
        }
        if self.script.duration == 0 || self.script.duration > self.frames {
            return fail(format!(
                "script duration must lie in 1..={} frames",
                self.frames
            ));
        }
        if !self.script.amplitude.is_finite() || !self.mismatch.magnitude.is_finite() {
            return fail("script amplitude and mismatch magnitude must be finite".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail("noise sigma must be non-negative".into());
        }
        if !(self.binding_radius.is_finite() && self.binding_radius > 0.0) {
            return fail("binding radius must be positive".into());
        }
        if self.patches < 1 || self.tracks < 1 {
            return fail("patch and track counts must be positive".into());
        }
        let mats = match &self.teacher {
            TeacherMaterials::Uniform { material } => vec![*material],
            TeacherMaterials::SplitX { left, right } => vec![*left, *right],
        };
        if mats
            .iter()
            .any(|m| !(m.youngs > 0.0 && m.youngs.is_finite() && (0.0..0.5).contains(&m.poisson)))
        {
            return fail("teacher materials need E > 0 and 0 <= nu < 0.5".into());
        }
        self.gains.validate()
    }
}

/// Ground truth behind a generated bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub spec: ScenarioSpec,
    pub sim: SimConfig,
    pub materials: MaterialField,
    pub gains: DcaGains,
    pub mismatch: Mismatch,
    /// Particle index behind each track.
    pub track_particles: Vec<usize>,
    pub seed: u64,
}
