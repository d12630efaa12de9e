//! Small dense linear algebra helpers shared by the stress models and the
//! deformation-gradient clamp.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Frobenius inner product.
#[inline]
pub fn ddot(a: &Mat3, b: &Mat3) -> f64 {
    a.component_mul(b).sum()
}

#[inline]
pub fn is_finite_mat(m: &Mat3) -> bool {
    m.iter().all(|x| x.is_finite())
}

#[inline]
pub fn is_finite_vec(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Singular value decomposition with `u` and `v` proper rotations.
///
/// When `det(F) < 0` the smallest singular value carries the sign.
#[derive(Debug, Clone, Copy)]
pub struct RotSvd {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

impl RotSvd {
    pub fn new(f: &Mat3) -> Self {
        let svd = f.svd(true, true);
        let mut u = svd.u.expect("svd u");
        let mut v = svd.v_t.expect("svd v").transpose();
        let mut sigma = svd.singular_values;
        let (imin, _) = sigma.argmin();
        if u.determinant() < 0.0 {
            u.column_mut(imin).neg_mut();
            sigma[imin] = -sigma[imin];
        }
        if v.determinant() < 0.0 {
            v.column_mut(imin).neg_mut();
            sigma[imin] = -sigma[imin];
        }
        RotSvd { u, sigma, v }
    }

    pub fn compose(&self, sigma: &Vec3) -> Mat3 {
        self.u * Mat3::from_diagonal(sigma) * self.v.transpose()
    }

    /// Rotation factor of the polar decomposition `F = R S`.
    pub fn rotation(&self) -> Mat3 {
        self.u * self.v.transpose()
    }
}

/// Rotation factor of the polar decomposition of `f` with `det(f) > 0`,
/// by determinant-scaled Newton iteration finished with one unscaled step.
/// `None` when the iteration does not settle.
pub fn polar_rotation(f: &Mat3) -> Option<Mat3> {
    let mut r = *f;
    for _ in 0..32 {
        let inv_t = r.try_inverse()?.transpose();
        let det = r.determinant();
        if !(det > 0.0) {
            return None;
        }
        let g = det.cbrt().recip();
        let next = 0.5 * (r * g + inv_t / g);
        let step = (next - r).norm();
        r = next;
        if step < 1e-9 {
            let inv_t = r.try_inverse()?.transpose();
            return Some(0.5 * (r + inv_t));
        }
    }
    None
}

/// Pullback of `G` through the spectral map `F -> U diag(f(σ)) Vᵀ`.
///
/// `values` holds `f(σ_i)` and `slopes` holds `f'(σ_i)`. Off-diagonal
/// entries in the singular frame split into a symmetric part scaled by the
/// divided difference of `f` and an antisymmetric part scaled by
/// `(f_i + f_j) / (σ_i + σ_j)`.
pub fn spectral_vjp(svd: &RotSvd, values: &Vec3, slopes: &Vec3, g: &Mat3) -> Mat3 {
    let gh = svd.u.transpose() * g * svd.v;
    let s = &svd.sigma;
    let mut out = Mat3::zeros();
    for i in 0..3 {
        out[(i, i)] = slopes[i] * gh[(i, i)];
        for j in 0..3 {
            if i == j {
                continue;
            }
            let dsig = s[i] - s[j];
            let scale = s[i].abs().max(s[j].abs()).max(1.0);
            let sym = if dsig.abs() > 1e-10 * scale {
                (values[i] - values[j]) / dsig
            } else {
                0.5 * (slopes[i] + slopes[j])
            };
            let ssum = s[i] + s[j];
            let anti = if ssum.abs() > 1e-12 {
                (values[i] + values[j]) / ssum
            } else {
                0.0
            };
            let gs = 0.5 * (gh[(i, j)] + gh[(j, i)]);
            let ga = 0.5 * (gh[(i, j)] - gh[(j, i)]);
            out[(i, j)] = sym * gs + anti * ga;
        }
    }
    svd.u * out * svd.v.transpose()
}
