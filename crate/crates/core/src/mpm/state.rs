use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{is_finite_mat, is_finite_vec, Mat3, Vec3};

/// Material-particle state: positions, velocities, deformation gradients,
/// APIC affine matrices and the per-particle mass and rest volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub f: Vec<Mat3>,
    pub c: Vec<Mat3>,
    pub mass: Vec<f64>,
    pub volume: Vec<f64>,
}

impl ParticleState {
    /// Undeformed particles at rest with uniform rest volume.
    pub fn at_rest(positions: Vec<Vec3>, volume: f64, density: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::arg("particle state needs at least one particle"));
        }
        if !(volume > 0.0 && density > 0.0) {
            return Err(Error::arg("particle volume and density must be positive"));
        }
        let n = positions.len();
        Ok(ParticleState {
            x: positions,
            v: vec![Vec3::zeros(); n],
            f: vec![Mat3::identity(); n],
            c: vec![Mat3::zeros(); n],
            mass: vec![volume * density; n],
            volume: vec![volume; n],
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.x.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn momentum(&self) -> Vec3 {
        self.v.iter().zip(&self.mass).map(|(v, m)| v * *m).sum()
    }

    pub fn centroid(&self) -> Vec3 {
        self.x.iter().sum::<Vec3>() / self.len() as f64
    }

    /// Index of the first particle carrying a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        (0..self.len()).find(|&p| {
            !(is_finite_vec(&self.x[p])
                && is_finite_vec(&self.v[p])
                && is_finite_mat(&self.f[p])
                && is_finite_mat(&self.c[p]))
        })
    }

    /// Largest Frobenius distance of a deformation gradient from identity.
    pub fn max_strain(&self) -> f64 {
        self.f
            .iter()
            .map(|f| (f - Mat3::identity()).norm())
            .fold(0.0, f64::max)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let n = self.x.len();
        if n == 0 {
            return Err(Error::arg("particle state is empty"));
        }
        if [
            self.v.len(),
            self.f.len(),
            self.c.len(),
            self.mass.len(),
            self.volume.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(Error::arg("particle state field lengths differ"));
        }
        if self.mass.iter().chain(&self.volume).any(|m| !(*m > 0.0)) {
            return Err(Error::arg("particle mass and volume must be positive"));
        }
        Ok(())
    }
}
