//! Hyperelastic stress laws and their mixture.
//!
//! Every expert is linear in the Lamé parameters, `P_k = μ A_k(F) + λ B_k(F)`:
//!
//! | expert | A_k                | B_k                     |
//! |--------|--------------------|-------------------------|
//! | NH     | F − F⁻ᵀ            | ln(J) F⁻ᵀ               |
//! | Cor    | 2(F − R)           | (J − 1) J F⁻ᵀ           |
//! | StVK   | 2 F E              | tr(E) F                 |
//!
//! with `E = ½(FᵀF − I)` and `R` the rotation of the polar decomposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{ddot, polar_rotation, spectral_vjp, Mat3, RotSvd, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expert {
    #[serde(rename = "nh")]
    NeoHookean,
    #[serde(rename = "cor")]
    Corotated,
    #[serde(rename = "stvk")]
    StVenantKirchhoff,
}

impl Expert {
    pub const ALL: [Expert; 3] = [
        Expert::NeoHookean,
        Expert::Corotated,
        Expert::StVenantKirchhoff,
    ];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Expert::NeoHookean => 0,
            Expert::Corotated => 1,
            Expert::StVenantKirchhoff => 2,
        }
    }
}

impl std::str::FromStr for Expert {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nh" => Ok(Expert::NeoHookean),
            "cor" => Ok(Expert::Corotated),
            "stvk" => Ok(Expert::StVenantKirchhoff),
            other => Err(Error::arg(format!("unknown expert `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lame {
    pub mu: f64,
    pub lambda: f64,
}

impl Lame {
    pub fn new(e: f64, nu: f64) -> Self {
        Lame {
            mu: e / (2.0 * (1.0 + nu)),
            lambda: e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)),
        }
    }

    /// Pulls (μ̄, λ̄) back to (Ē, ν̄).
    pub fn pullback(e: f64, nu: f64, mu_bar: f64, lambda_bar: f64) -> (f64, f64) {
        let a = 1.0 + nu;
        let b = 1.0 - 2.0 * nu;
        let dmu_de = 1.0 / (2.0 * a);
        let dmu_dnu = -e / (2.0 * a * a);
        let dl_de = nu / (a * b);
        let dl_dnu = e * (1.0 + 2.0 * nu * nu) / (a * a * b * b);
        (
            mu_bar * dmu_de + lambda_bar * dl_de,
            mu_bar * dmu_dnu + lambda_bar * dl_dnu,
        )
    }
}

/// Per-particle constitutive parameters after patch interpolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleMaterial {
    pub e: f64,
    pub nu: f64,
    /// Expert weights in `Expert::ALL` order, summing to one.
    pub weights: [f64; 3],
}

/// Cotangent of a [`ParticleMaterial`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ParticleMaterialGrad {
    pub e: f64,
    pub nu: f64,
    pub weights: [f64; 3],
}

impl std::ops::AddAssign for ParticleMaterialGrad {
    fn add_assign(&mut self, o: Self) {
        self.e += o.e;
        self.nu += o.nu;
        for k in 0..3 {
            self.weights[k] += o.weights[k];
        }
    }
}

/// Quantities of `F` shared by the three experts.
struct Kinematics {
    f: Mat3,
    j: f64,
    finv_t: Mat3,
    green: Mat3,
    rotation: Option<Mat3>,
}

impl Kinematics {
    fn new(f: &Mat3, need_polar: bool, particle: usize) -> Result<Self> {
        let j = f.determinant();
        if !(j > 0.0) {
            return Err(Error::Numerical {
                particle,
                what: format!("det(F) = {j} is not positive"),
            });
        }
        let finv_t = f
            .try_inverse()
            .ok_or_else(|| Error::Numerical {
                particle,
                what: "singular deformation gradient".into(),
            })?
            .transpose();
        let green = 0.5 * (f.transpose() * f - Mat3::identity());
        Ok(Kinematics {
            f: *f,
            j,
            finv_t,
            green,
            rotation: need_polar
                .then(|| polar_rotation(f).unwrap_or_else(|| RotSvd::new(f).rotation())),
        })
    }

    /// (A_k, B_k) basis of expert `k`.
    fn basis(&self, kind: Expert) -> (Mat3, Mat3) {
        let f = &self.f;
        match kind {
            Expert::NeoHookean => (f - self.finv_t, self.j.ln() * self.finv_t),
            Expert::Corotated => {
                let r = self.rotation.expect("polar factor");
                (2.0 * (f - r), (self.j - 1.0) * self.j * self.finv_t)
            }
            Expert::StVenantKirchhoff => (2.0 * f * self.green, self.green.trace() * f),
        }
    }

    /// Gradients of ⟨G, A_k⟩ and ⟨G, B_k⟩ w.r.t. F.
    fn basis_vjp(&self, kind: Expert, g: &Mat3) -> (Mat3, Mat3) {
        let f = &self.f;
        let a = &self.finv_t;
        let aga = a * g.transpose() * a;
        match kind {
            Expert::NeoHookean => {
                let ga = ddot(g, a);
                (g + aga, ga * a - self.j.ln() * aga)
            }
            Expert::Corotated => {
                let svd = RotSvd::new(f);
                let dr = spectral_vjp(&svd, &Vec3::repeat(1.0), &Vec3::zeros(), g);
                let ga = ddot(g, a);
                let j = self.j;
                (
                    2.0 * (g - dr),
                    j * j * ga * a + (j - 1.0) * j * (ga * a - aga),
                )
            }
            Expert::StVenantKirchhoff => {
                let h = f.transpose() * g;
                let sym = 0.5 * (h + h.transpose());
                (
                    2.0 * (g * self.green + f * sym),
                    ddot(g, f) * f + self.green.trace() * g,
                )
            }
        }
    }
}

/// First Piola–Kirchhoff stress of a single expert.
pub fn expert_stress(kind: Expert, f: &Mat3, e: f64, nu: f64) -> Result<Mat3> {
    let kin = Kinematics::new(f, kind == Expert::Corotated, 0)?;
    let lame = Lame::new(e, nu);
    let (a, b) = kin.basis(kind);
    Ok(lame.mu * a + lame.lambda * b)
}

/// Mixture stress `Σ_k w_k P_k(F; E, ν)` for one particle.
pub fn mixed_stress(f: &Mat3, mat: &ParticleMaterial, particle: usize) -> Result<Mat3> {
    let kin = Kinematics::new(f, mat.weights[1] != 0.0, particle)?;
    let lame = Lame::new(mat.e, mat.nu);
    let mut p = Mat3::zeros();
    for kind in Expert::ALL {
        let w = mat.weights[kind.index()];
        if w == 0.0 {
            continue;
        }
        let (a, b) = kin.basis(kind);
        p += w * (lame.mu * a + lame.lambda * b);
    }
    Ok(p)
}

/// Pullback of a stress cotangent `G` through [`mixed_stress`].
pub fn mixed_stress_vjp(
    f: &Mat3,
    mat: &ParticleMaterial,
    g: &Mat3,
    particle: usize,
) -> Result<(Mat3, ParticleMaterialGrad)> {
    let kin = Kinematics::new(f, true, particle)?;
    let lame = Lame::new(mat.e, mat.nu);
    let mut f_bar = Mat3::zeros();
    let mut grad = ParticleMaterialGrad::default();
    let (mut mu_bar, mut lambda_bar) = (0.0, 0.0);
    for kind in Expert::ALL {
        let k = kind.index();
        let w = mat.weights[k];
        let (a, b) = kin.basis(kind);
        let (ga, gb) = (ddot(g, &a), ddot(g, &b));
        grad.weights[k] = lame.mu * ga + lame.lambda * gb;
        mu_bar += w * ga;
        lambda_bar += w * gb;
        if w != 0.0 {
            let (da, db) = kin.basis_vjp(kind, g);
            f_bar += w * (lame.mu * da + lame.lambda * db);
        }
    }
    let (e_bar, nu_bar) = Lame::pullback(mat.e, mat.nu, mu_bar, lambda_bar);
    grad.e = e_bar;
    grad.nu = nu_bar;
    Ok((f_bar, grad))
}
