use serde::{Deserialize, Serialize};

use super::bounded::{
    bounded_linear, bounded_linear_grad, bounded_linear_inverse, bounded_log, bounded_log_grad,
    bounded_log_inverse,
};
use super::experts::{Expert, ParticleMaterial, ParticleMaterialGrad};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mpm::Category;

/// Patches each particle interpolates from.
pub const ANCHORS_PER_PARTICLE: usize = 3;
/// Floor on particle-anchor distances before inversion, meters.
pub const MIN_ANCHOR_DISTANCE: f64 = 1e-8;
pub const DEFAULT_PATCH_COUNT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialBounds {
    pub e_min: f64,
    pub e_max: f64,
    pub nu_min: f64,
    pub nu_max: f64,
}

impl MaterialBounds {
    pub fn for_category(category: Category) -> Self {
        match category {
            Category::Linear | Category::Planar => MaterialBounds {
                e_min: 1e4,
                e_max: 1e6,
                nu_min: 0.0,
                nu_max: 0.35,
            },
            Category::Volumetric => MaterialBounds {
                e_min: 1e5,
                e_max: 1e7,
                nu_min: 0.0,
                nu_max: 0.45,
            },
        }
    }

    #[inline]
    pub fn youngs(&self, raw: f64) -> f64 {
        bounded_log(raw, self.e_min, self.e_max)
    }

    #[inline]
    pub fn poisson(&self, raw: f64) -> f64 {
        bounded_linear(raw, self.nu_min, self.nu_max)
    }

    pub fn raw_youngs(&self, e: f64) -> f64 {
        bounded_log_inverse(e, self.e_min, self.e_max)
    }

    pub fn raw_poisson(&self, nu: f64) -> f64 {
        bounded_linear_inverse(nu, self.nu_min, self.nu_max)
    }
}

/// Particle-to-patch interpolation: three anchors and their normalized
/// inverse-distance weights, fixed after initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchBinding {
    pub anchors: [usize; ANCHORS_PER_PARTICLE],
    pub beta: [f64; ANCHORS_PER_PARTICLE],
}

/// Patch-level material parameters with fixed particle interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialField {
    pub bounds: MaterialBounds,
    pub anchors: Vec<[f64; 3]>,
    /// Expert logits per patch, `Expert::ALL` order.
    pub logits: Vec<[f64; 3]>,
    pub raw_e: Vec<f64>,
    pub raw_nu: Vec<f64>,
    pub bindings: Vec<PatchBinding>,
}

/// Gradient of a scalar w.r.t. the free parameters of a [`MaterialField`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialGrads {
    pub raw_e: Vec<f64>,
    pub raw_nu: Vec<f64>,
    pub logits: Vec<[f64; 3]>,
}

impl MaterialGrads {
    pub fn zeros(patches: usize) -> Self {
        MaterialGrads {
            raw_e: vec![0.0; patches],
            raw_nu: vec![0.0; patches],
            logits: vec![[0.0; 3]; patches],
        }
    }

    /// Same layout as [`MaterialField::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.raw_e.len() * 5);
        out.extend_from_slice(&self.raw_e);
        out.extend_from_slice(&self.raw_nu);
        out.extend(self.logits.iter().flatten());
        out
    }

    pub fn add(&mut self, other: &MaterialGrads) {
        for (a, b) in self.raw_e.iter_mut().zip(&other.raw_e) {
            *a += b;
        }
        for (a, b) in self.raw_nu.iter_mut().zip(&other.raw_nu) {
            *a += b;
        }
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
    }
}

/// Farthest-point sampling starting from index 0.
pub fn farthest_point_sampling(points: &[Vec3], count: usize) -> Vec<usize> {
    let mut chosen = Vec::with_capacity(count);
    if points.is_empty() || count == 0 {
        return chosen;
    }
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut next = 0;
    for _ in 0..count.min(points.len()) {
        chosen.push(next);
        let anchor = points[next];
        let mut best = (0usize, -1.0);
        for (i, p) in points.iter().enumerate() {
            let d = (p - anchor).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.1 {
                best = (i, dist[i]);
            }
        }
        next = best.0;
    }
    chosen
}

/// Normalized inverse-distance weights with the zero-distance floor.
pub fn inverse_distance_weights<const K: usize>(distances: [f64; K]) -> [f64; K] {
    let inv = distances.map(|d| 1.0 / d.max(MIN_ANCHOR_DISTANCE));
    let total: f64 = inv.iter().sum();
    inv.map(|w| w / total)
}

fn softmax(l: &[f64; 3]) -> [f64; 3] {
    let m = l[0].max(l[1]).max(l[2]);
    let e = l.map(|x| (x - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|x| x / s)
}

impl MaterialField {
    /// Samples `patches` anchors from the rest geometry and binds every
    /// particle to its three nearest anchors. Parameters start at raw 0.
    pub fn init_patches(rest: &[Vec3], patches: usize, bounds: MaterialBounds) -> Result<Self> {
        if patches < ANCHORS_PER_PARTICLE {
            return Err(Error::arg(format!(
                "need at least {ANCHORS_PER_PARTICLE} patches, got {patches}"
            )));
        }
        if patches > rest.len() {
            return Err(Error::arg(format!(
                "{patches} patches requested for {} particles",
                rest.len()
            )));
        }
        let anchors: Vec<Vec3> = farthest_point_sampling(rest, patches)
            .into_iter()
            .map(|i| rest[i])
            .collect();
        let bindings = rest
            .iter()
            .map(|x| {
                let mut near = [(f64::INFINITY, 0usize); ANCHORS_PER_PARTICLE];
                for (c, a) in anchors.iter().enumerate() {
                    let d = (x - a).norm();
                    if d < near[ANCHORS_PER_PARTICLE - 1].0 {
                        near[ANCHORS_PER_PARTICLE - 1] = (d, c);
                        near.sort_by(|p, q| p.0.total_cmp(&q.0));
                    }
                }
                PatchBinding {
                    anchors: near.map(|(_, c)| c),
                    beta: inverse_distance_weights(near.map(|(d, _)| d)),
                }
            })
            .collect();
        Ok(MaterialField {
            bounds,
            anchors: anchors.iter().map(|a| [a[0], a[1], a[2]]).collect(),
            logits: vec![[0.0; 3]; patches],
            raw_e: vec![0.0; patches],
            raw_nu: vec![0.0; patches],
            bindings,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn particle_count(&self) -> usize {
        self.bindings.len()
    }

    pub fn anchor(&self, c: usize) -> Vec3 {
        Vec3::from(self.anchors[c])
    }

    pub fn patch_youngs(&self, c: usize) -> f64 {
        self.bounds.youngs(self.raw_e[c])
    }

    pub fn patch_poisson(&self, c: usize) -> f64 {
        self.bounds.poisson(self.raw_nu[c])
    }

    /// Per-patch expert probabilities `softmax_k(ℓ_{k,c})`.
    pub fn patch_probabilities(&self) -> Vec<[f64; 3]> {
        self.logits.iter().map(softmax).collect()
    }

    /// Per-particle expert weights `w_{k,p} = Σ_c β_{p,c} q_{k,c}`.
    pub fn mixture_weights(&self) -> Vec<[f64; 3]> {
        let q = self.patch_probabilities();
        self.bindings
            .iter()
            .map(|b| {
                let mut w = [0.0; 3];
                for (&c, &beta) in b.anchors.iter().zip(&b.beta) {
                    for k in 0..3 {
                        w[k] += beta * q[c][k];
                    }
                }
                w
            })
            .collect()
    }

    /// Expert with the largest weight at each particle.
    pub fn dominant_experts(&self) -> Vec<Expert> {
        self.mixture_weights()
            .iter()
            .map(|w| {
                let k = (0..3).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
                Expert::ALL[k]
            })
            .collect()
    }

    /// Interpolated per-particle parameters; `youngs_scale` multiplies E.
    pub fn particle_materials(&self, youngs_scale: f64) -> Vec<ParticleMaterial> {
        let e: Vec<f64> = (0..self.patch_count())
            .map(|c| self.patch_youngs(c))
            .collect();
        let nu: Vec<f64> = (0..self.patch_count())
            .map(|c| self.patch_poisson(c))
            .collect();
        let w = self.mixture_weights();
        self.bindings
            .iter()
            .zip(w)
            .map(|(b, weights)| {
                let mut pe = 0.0;
                let mut pnu = 0.0;
                for (&c, &beta) in b.anchors.iter().zip(&b.beta) {
                    pe += beta * e[c];
                    pnu += beta * nu[c];
                }
                ParticleMaterial {
                    e: pe * youngs_scale,
                    nu: pnu,
                    weights,
                }
            })
            .collect()
    }

    pub fn mean_particle_youngs(&self) -> f64 {
        let m = self.particle_materials(1.0);
        m.iter().map(|p| p.e).sum::<f64>() / m.len() as f64
    }

    /// Pulls per-particle cotangents back to the patch parameters.
    pub fn pullback(&self, grads: &[ParticleMaterialGrad], youngs_scale: f64) -> MaterialGrads {
        let m = self.patch_count();
        let mut e_bar = vec![0.0; m];
        let mut nu_bar = vec![0.0; m];
        let mut q_bar = vec![[0.0; 3]; m];
        for (b, g) in self.bindings.iter().zip(grads) {
            for (&c, &beta) in b.anchors.iter().zip(&b.beta) {
                e_bar[c] += beta * youngs_scale * g.e;
                nu_bar[c] += beta * g.nu;
                for k in 0..3 {
                    q_bar[c][k] += beta * g.weights[k];
                }
            }
        }
        let q = self.patch_probabilities();
        let b = &self.bounds;
        MaterialGrads {
            raw_e: (0..m)
                .map(|c| e_bar[c] * bounded_log_grad(self.raw_e[c], b.e_min, b.e_max))
                .collect(),
            raw_nu: (0..m)
                .map(|c| nu_bar[c] * bounded_linear_grad(self.raw_nu[c], b.nu_min, b.nu_max))
                .collect(),
            logits: (0..m)
                .map(|c| {
                    let dot: f64 = (0..3).map(|k| q[c][k] * q_bar[c][k]).sum();
                    [0, 1, 2].map(|k| q[c][k] * (q_bar[c][k] - dot))
                })
                .collect(),
        }
    }

    /// Free parameters as one vector: `[raw_e | raw_nu | logits]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.patch_count() * 5);
        out.extend_from_slice(&self.raw_e);
        out.extend_from_slice(&self.raw_nu);
        out.extend(self.logits.iter().flatten());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let m = self.patch_count();
        if flat.len() != 5 * m {
            return Err(Error::arg(format!(
                "expected {} material parameters, got {}",
                5 * m,
                flat.len()
            )));
        }
        self.raw_e.copy_from_slice(&flat[..m]);
        self.raw_nu.copy_from_slice(&flat[m..2 * m]);
        for (c, l) in self.logits.iter_mut().enumerate() {
            l.copy_from_slice(&flat[2 * m + 3 * c..2 * m + 3 * c + 3]);
        }
        Ok(())
    }

    /// Sets every patch from `f(anchor) = (E, ν, logits)`.
    pub fn assign_patches(&mut self, mut f: impl FnMut(Vec3) -> (f64, f64, [f64; 3])) {
        for c in 0..self.patch_count() {
            let (e, nu, logits) = f(self.anchor(c));
            self.raw_e[c] = self.bounds.raw_youngs(e);
            self.raw_nu[c] = self.bounds.raw_poisson(nu);
            self.logits[c] = logits;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.patch_count();
        if m < ANCHORS_PER_PARTICLE
            || self.logits.len() != m
            || self.raw_e.len() != m
            || self.raw_nu.len() != m
        {
            return Err(Error::Validation(
                "material field patch arrays disagree".into(),
            ));
        }
        for b in &self.bindings {
            if b.anchors.iter().any(|&c| c >= m) {
                return Err(Error::Validation(
                    "patch binding references missing anchor".into(),
                ));
            }
            let s: f64 = b.beta.iter().sum();
            if (s - 1.0).abs() > 1e-9 || b.beta.iter().any(|&x| x < 0.0) {
                return Err(Error::Validation(
                    "patch weights must form a simplex".into(),
                ));
            }
        }
        let b = &self.bounds;
        if !(b.e_min > 0.0
            && b.e_min < b.e_max
            && b.nu_min >= 0.0
            && b.nu_min < b.nu_max
            && b.nu_max < 0.5)
        {
            return Err(Error::Validation("invalid material bounds".into()));
        }
        Ok(())
    }
}

/// Logits that put nearly all weight on one expert.
pub fn one_hot_logits(expert: Expert, strength: f64) -> [f64; 3] {
    let mut l = [0.0; 3];
    l[expert.index()] = strength;
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|i| {
                let t = i as f64;
                Vec3::new(
                    0.3 + 0.4 * ((t * 0.37).sin() * 0.5 + 0.5),
                    0.3 + 0.4 * ((t * 0.73).cos() * 0.5 + 0.5),
                    0.3 + 0.4 * ((t * 1.31).sin() * 0.5 + 0.5),
                )
            })
            .collect()
    }

    #[test]
    fn inverse_distance_examples() {
        let w = inverse_distance_weights([1.0, 2.0, 2.0]);
        assert!(
            (w[0] - 0.5).abs() < 1e-15
                && (w[1] - 0.25).abs() < 1e-15
                && (w[2] - 0.25).abs() < 1e-15
        );
        let w = inverse_distance_weights([0.3, 0.3, 0.3]);
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let w = inverse_distance_weights([0.0, 0.1, 0.2]);
        assert!((w[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn init_rejects_bad_counts() {
        let pts = cloud(10);
        let b = MaterialBounds::for_category(Category::Planar);
        assert!(MaterialField::init_patches(&pts, 11, b).is_err());
        assert!(MaterialField::init_patches(&pts, 2, b).is_err());
        assert!(MaterialField::init_patches(&pts, 10, b).is_ok());
    }

    #[test]
    fn fps_spreads_out() {
        let pts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.01, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.5, 0.0, 0.0),
        ];
        assert_eq!(farthest_point_sampling(&pts, 3), vec![0, 2, 3]);
    }

    #[test]
    fn particle_on_anchor_gets_full_weight() {
        let pts = cloud(50);
        let f =
            MaterialField::init_patches(&pts, 8, MaterialBounds::for_category(Category::Planar))
                .unwrap();
        // particle 0 is the first FPS sample
        let b = &f.bindings[0];
        assert_eq!(b.anchors[0], 0);
        assert!((b.beta[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equal_logits_give_uniform_weights() {
        let pts = cloud(40);
        let f =
            MaterialField::init_patches(&pts, 6, MaterialBounds::for_category(Category::Planar))
                .unwrap();
        for w in f.mixture_weights() {
            for x in w {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_anchor_passthrough() {
        let pts = cloud(20);
        let mut f =
            MaterialField::init_patches(&pts, 4, MaterialBounds::for_category(Category::Planar))
                .unwrap();
        f.bindings[3] = PatchBinding {
            anchors: [1, 2, 3],
            beta: [1.0, 0.0, 0.0],
        };
        f.logits[1] = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
        let w = f.mixture_weights()[3];
        for (a, b) in w.iter().zip([0.7, 0.2, 0.1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn large_logit_dominates_by_patch_mass() {
        let pts = cloud(30);
        let mut f =
            MaterialField::init_patches(&pts, 5, MaterialBounds::for_category(Category::Planar))
                .unwrap();
        f.logits[2] = one_hot_logits(Expert::StVenantKirchhoff, 20.0);
        let q = 1.0 / (1.0 + 2.0 * (-20.0f64).exp());
        for (b, w) in f.bindings.iter().zip(f.mixture_weights()) {
            let mass: f64 = b
                .anchors
                .iter()
                .zip(&b.beta)
                .filter(|(c, _)| **c == 2)
                .map(|(_, beta)| beta)
                .sum();
            let expect = mass * q + (1.0 - mass) / 3.0;
            assert!((w[2] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let pts = cloud(25);
        let mut f = MaterialField::init_patches(
            &pts,
            5,
            MaterialBounds::for_category(Category::Volumetric),
        )
        .unwrap();
        let flat: Vec<f64> = (0..25).map(|i| ((i as f64) * 0.77).sin()).collect();
        f.set_flat(&flat).unwrap();
        // scalar: Σ_p a_p E_p + b_p ν_p + c_p·w_p with fixed coefficients
        let coef: Vec<ParticleMaterialGrad> = (0..25)
            .map(|p| {
                let t = p as f64;
                ParticleMaterialGrad {
                    e: 1e-6 * (t * 0.3).cos(),
                    nu: (t * 0.5).sin(),
                    weights: [(t * 0.1).sin(), (t * 0.2).cos(), 0.3],
                }
            })
            .collect();
        let scalar = |f: &MaterialField| -> f64 {
            f.particle_materials(0.7)
                .iter()
                .zip(&coef)
                .map(|(m, g)| {
                    m.e * g.e
                        + m.nu * g.nu
                        + (0..3).map(|k| m.weights[k] * g.weights[k]).sum::<f64>()
                })
                .sum()
        };
        let grads = f.pullback(&coef, 0.7).to_flat();
        let h = 1e-6;
        for i in 0..25 {
            let mut fp = f.clone();
            let mut x = flat.clone();
            x[i] += h;
            fp.set_flat(&x).unwrap();
            let mut fm = f.clone();
            x[i] -= 2.0 * h;
            fm.set_flat(&x).unwrap();
            let fd = (scalar(&fp) - scalar(&fm)) / (2.0 * h);
            assert!(
                (fd - grads[i]).abs() < 1e-6 * fd.abs().max(1e-3),
                "param {i}: {fd} vs {}",
                grads[i]
            );
        }
    }

    proptest! {
        #[test]
        fn weights_form_simplex(seed in 0u64..1000) {
            let pts: Vec<Vec3> = cloud(60).into_iter().map(|p| p * (1.0 + (seed as f64) * 1e-4)).collect();
            let mut f = MaterialField::init_patches(&pts, 7, MaterialBounds::for_category(Category::Planar)).unwrap();
            for (c, l) in f.logits.iter_mut().enumerate() {
                *l = [((seed + c as u64) as f64).sin() * 5.0, (c as f64).cos() * 3.0, -1.0];
            }
            f.validate().unwrap();
            for (b, w) in f.bindings.iter().zip(f.mixture_weights()) {
                prop_assert!((b.beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.iter().all(|x| *x >= 0.0));
            }
            for m in f.particle_materials(1.0) {
                prop_assert!(m.e > 1e4 && m.e < 1e6 && m.nu > 0.0 && m.nu < 0.35);
            }
        }
    }
}
