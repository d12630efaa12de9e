use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Object category; selects per-category solver and material overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Linear,
    Planar,
    Volumetric,
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Category::Linear),
            "planar" => Ok(Category::Planar),
            "volumetric" => Ok(Category::Volumetric),
            other => Err(Error::arg(format!("unknown category `{other}`"))),
        }
    }
}

/// MPM solver configuration.
///
/// Key names are the ones accepted in the `[sim]` table of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Background grid nodes per axis over the unit cube.
    pub grid_resolution: usize,
    /// Substep length δt, seconds.
    pub substep_dt: f64,
    /// Frame interval Δt, seconds.
    pub frame_dt: f64,
    pub substeps_per_frame: usize,
    /// m/s².
    pub gravity: [f64; 3],
    /// Exponential particle velocity decay rate, 1/s.
    pub particle_damping: f64,
    /// Multiplicative grid velocity damping per substep.
    pub grid_velocity_damping: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    /// Height of the sticky floor above `clip_min`.
    pub floor_margin: f64,
    pub svd_clamp_min: f64,
    pub svd_clamp_max: f64,
    /// Material density used to derive particle masses, kg/m³.
    pub density: f64,
    /// Substeps recorded per frame for truncated backpropagation.
    pub bptt_window: usize,
    /// A rollout is declared divergent once any particle covers more than
    /// this many grid cells in one substep.
    pub divergence_cfl: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            grid_resolution: 32,
            substep_dt: 8e-4,
            frame_dt: 1.0 / 30.0,
            substeps_per_frame: 42,
            gravity: [0.0, 0.0, -9.8],
            particle_damping: 20.0,
            grid_velocity_damping: 0.999,
            clip_min: 0.05,
            clip_max: 0.95,
            floor_margin: 0.0,
            svd_clamp_min: 1.0 / 2.0,
            svd_clamp_max: 2.0,
            density: 1000.0,
            bptt_window: 20,
            divergence_cfl: 1.0,
        }
    }
}

impl SimConfig {
    pub fn for_category(category: Category) -> Self {
        match category {
            Category::Linear | Category::Planar => SimConfig::default(),
            Category::Volumetric => SimConfig {
                particle_damping: 5.0,
                floor_margin: 0.05,
                ..SimConfig::default()
            },
        }
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        1.0 / self.grid_resolution as f64
    }

    #[inline]
    pub fn floor_height(&self) -> f64 {
        self.clip_min + self.floor_margin
    }

    /// Particle speed above which a rollout counts as divergent, m/s.
    pub fn divergence_speed(&self) -> f64 {
        self.divergence_cfl * self.dx() / self.substep_dt
    }

    /// First substep of each frame whose intermediate state is recorded.
    pub fn first_recorded_substep(&self) -> usize {
        self.substeps_per_frame.saturating_sub(self.bptt_window)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid_resolution < 4 {
            return fail("grid_resolution must be at least 4");
        }
        if !(self.substep_dt > 0.0) || !(self.frame_dt > 0.0) {
            return fail("substep_dt and frame_dt must be positive");
        }
        if self.substeps_per_frame == 0 {
            return fail("substeps_per_frame must be positive");
        }
        let span = self.substeps_per_frame as f64 * self.substep_dt;
        if (span - self.frame_dt).abs() > self.substep_dt * (1.0 + 1e-9) {
            return fail("substeps_per_frame * substep_dt must match frame_dt within one substep");
        }
        if !(self.grid_velocity_damping > 0.0 && self.grid_velocity_damping <= 1.0) {
            return fail("grid_velocity_damping must lie in (0, 1]");
        }
        if !(self.divergence_cfl > 0.0) {
            return fail("divergence_cfl must be positive");
        }
        if self.particle_damping < 0.0 {
            return fail("particle_damping must be non-negative");
        }
        let dx = self.dx();
        if !(self.clip_min >= 0.5 * dx && self.clip_max < (self.grid_resolution as f64 - 1.5) * dx)
            || self.clip_min >= self.clip_max
        {
            return fail("clip bounds must keep the 27-node stencil inside the grid");
        }
        if !(self.svd_clamp_min > 0.0 && self.svd_clamp_min <= 1.0 && self.svd_clamp_max >= 1.0) {
            return fail("svd clamp range must bracket 1");
        }
        if !(self.density > 0.0) {
            return fail("density must be positive");
        }
        if self.bptt_window == 0 {
            return fail("bptt_window must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.substeps_per_frame, 42);
        assert_eq!(cfg.grid_resolution, 32);
        assert_eq!(cfg.first_recorded_substep(), 22);
        let vol = SimConfig::for_category(Category::Volumetric);
        assert_eq!(vol.particle_damping, 5.0);
        assert_eq!(vol.floor_margin, 0.05);
        vol.validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_substeps() {
        let cfg = SimConfig {
            substeps_per_frame: 30,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SimConfig {
            grid_velocity_damping: 1.5,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parses_partial_toml() {
        let cfg: SimConfig = toml::from_str("substep_dt = 8e-4\nparticle_damping = 5.0\n").unwrap();
        assert_eq!(cfg.particle_damping, 5.0);
        assert_eq!(cfg.grid_resolution, 32);
        assert!(toml::from_str::<SimConfig>("unknown_key = 1").is_err());
    }
}
