//! Incremental linear blend skinning: dense appearance points follow the
//! local rigid motion of their nearest material particles, one frame at a
//! time.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

pub const DEFAULT_SKIN_NEIGHBORS: usize = 8;

/// Distances below this count as coincident.
pub const SKIN_DISTANCE_FLOOR: f64 = 1e-8;

/// Relative singular-value threshold below which the neighbor covariance
/// is treated as rank deficient.
const RANK_TOL: f64 = 1e-9;

/// Per appearance point: neighbor indices, blend weights and the frame-0
/// offsets from each neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinBinding {
    pub k: usize,
    /// `[point * k + j]`.
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub offsets: Vec<Vec3>,
}

impl SkinBinding {
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn weights_of(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }
}

/// Normalized inverse-distance weights. Coincident neighbors share all the
/// weight, the limit of inverse distance as the distance vanishes.
fn blend_weights(distances: &[f64]) -> Vec<f64> {
    let coincident = distances
        .iter()
        .filter(|&&d| d <= SKIN_DISTANCE_FLOOR)
        .count();
    if coincident > 0 {
        return distances
            .iter()
            .map(|&d| {
                if d <= SKIN_DISTANCE_FLOOR {
                    1.0 / coincident as f64
                } else {
                    0.0
                }
            })
            .collect();
    }
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|w| w / total).collect()
}

/// Binds every appearance point to its `k` nearest material particles.
pub fn bind_skin(appearance: &[Vec3], material: &[Vec3], k: usize) -> Result<SkinBinding> {
    if k == 0 || k > material.len() {
        return Err(Error::arg(format!(
            "skinning needs 1 <= K <= {} material particles, got K = {k}",
            material.len()
        )));
    }
    let mut binding = SkinBinding {
        k,
        neighbors: Vec::with_capacity(appearance.len() * k),
        weights: Vec::with_capacity(appearance.len() * k),
        offsets: Vec::with_capacity(appearance.len() * k),
    };
    let mut near: Vec<(f64, usize)> = Vec::with_capacity(material.len());
    for a in appearance {
        near.clear();
        near.extend(
            material
                .iter()
                .enumerate()
                .map(|(j, m)| ((a - m).norm_squared(), j)),
        );
        let order = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if k < near.len() {
            near.select_nth_unstable_by(k - 1, order);
        }
        let nearest = &mut near[..k];
        nearest.sort_by(order);
        let distances: Vec<f64> = nearest.iter().map(|(d2, _)| d2.sqrt()).collect();
        binding.weights.extend(blend_weights(&distances));
        for &(_, j) in nearest.iter() {
            binding.neighbors.push(j);
            binding.offsets.push(a - material[j]);
        }
    }
    Ok(binding)
}

/// Weighted best-fit rotation taking `prev` neighbors onto `cur`, or `None`
/// when the neighbor spread is rank deficient.
fn kabsch(prev: &[Vec3], cur: &[Vec3], w: &[f64]) -> Option<(Mat3, Vec3, Vec3)> {
    let pc: Vec3 = prev.iter().zip(w).map(|(p, w)| p * *w).sum();
    let qc: Vec3 = cur.iter().zip(w).map(|(q, w)| q * *w).sum();
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for ((p, q), w) in prev.iter().zip(cur).zip(w) {
        let dp = p - pc;
        h += (dp * (q - qc).transpose()) * *w;
        spread += (dp * dp.transpose()) * *w;
    }
    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if !(ev[2] > 0.0) || ev[1] <= RANK_TOL * ev[2] {
        return None;
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v = svd.v_t?.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Some((r, pc, qc))
}

/// Advances the appearance points by one frame of material motion.
pub fn skin_step(
    binding: &SkinBinding,
    prev: &[Vec3],
    cur: &[Vec3],
    appearance: &[Vec3],
) -> Result<Vec<Vec3>> {
    if prev.len() != cur.len() {
        return Err(Error::arg(format!(
            "material frames disagree: {} previous vs {} current particles",
            prev.len(),
            cur.len()
        )));
    }
    if appearance.len() != binding.len() {
        return Err(Error::arg(format!(
            "binding covers {} appearance points, got {}",
            binding.len(),
            appearance.len()
        )));
    }
    if let Some(&j) = binding.neighbors.iter().find(|&&j| j >= prev.len()) {
        return Err(Error::arg(format!(
            "binding references particle {j} of {}",
            prev.len()
        )));
    }
    let mut p = Vec::with_capacity(binding.k);
    let mut q = Vec::with_capacity(binding.k);
    let out = appearance
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let w = binding.weights_of(i);
            p.clear();
            q.clear();
            for &j in binding.neighbors_of(i) {
                p.push(prev[j]);
                q.push(cur[j]);
            }
            match kabsch(&p, &q, w) {
                Some((r, pc, qc)) => r * (a - pc) + qc,
                None => {
                    a + p
                        .iter()
                        .zip(&q)
                        .zip(w)
                        .map(|((p, q), w)| (q - p) * *w)
                        .sum::<Vec3>()
                }
            }
        })
        .collect();
    Ok(out)
}

/// Appearance trajectory driven incrementally over a material trajectory.
pub fn skin_trajectory(
    binding: &SkinBinding,
    material: &[&[Vec3]],
    appearance0: &[Vec3],
) -> Result<Vec<Vec<Vec3>>> {
    let mut frames = vec![appearance0.to_vec()];
    for pair in material.windows(2) {
        let next = skin_step(binding, pair[0], pair[1], frames.last().expect("frame 0"))?;
        frames.push(next);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.3..0.7),
                )
            })
            .collect()
    }

    #[test]
    fn coincident_point_takes_full_weight() {
        let m = cloud(20, 1);
        let b = bind_skin(&[m[7]], &m, 8).unwrap();
        assert_eq!(b.neighbors_of(0)[0], 7);
        assert_eq!(b.weights_of(0)[0], 1.0);
        assert!(b.weights_of(0)[1..].iter().all(|&w| w == 0.0));
    }

    #[test]
    fn equidistant_neighbors_weigh_uniformly() {
        let c = Vec3::new(0.5, 0.5, 0.5);
        let m: Vec<Vec3> = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y()]
            .iter()
            .map(|d| c + d * 0.1)
            .collect();
        let b = bind_skin(&[c], &m, 4).unwrap();
        for &w in b.weights_of(0) {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn single_neighbor_attaches_rigidly() {
        let m = cloud(10, 2);
        let a = cloud(5, 3);
        let b = bind_skin(&a, &m, 1).unwrap();
        let d = Vec3::new(0.01, -0.02, 0.03);
        let mut cur = m.clone();
        cur[b.neighbors_of(0)[0]] += d;
        let out = skin_step(&b, &m, &cur, &a).unwrap();
        assert!((out[0] - (a[0] + d)).norm() < 1e-15);
        for i in 0..a.len() {
            assert!(
                (out[i]
                    - m[b.neighbors_of(i)[0]]
                    - b.offsets[i]
                    - (cur[b.neighbors_of(i)[0]] - m[b.neighbors_of(i)[0]]))
                    .norm()
                    < 1e-12
            );
        }
    }

    #[test]
    fn static_material_leaves_points() {
        let m = cloud(40, 4);
        let a = cloud(30, 5);
        let b = bind_skin(&a, &m, 8).unwrap();
        let out = skin_step(&b, &m, &m, &a).unwrap();
        for (o, a) in out.iter().zip(&a) {
            assert!((o - a).norm() < 1e-12);
        }
    }

    #[test]
    fn translation_carries_points() {
        let m = cloud(40, 6);
        let a = cloud(30, 7);
        let b = bind_skin(&a, &m, 8).unwrap();
        let d = Vec3::new(0.05, 0.01, -0.02);
        let cur: Vec<Vec3> = m.iter().map(|x| x + d).collect();
        let out = skin_step(&b, &m, &cur, &a).unwrap();
        for (o, a) in out.iter().zip(&a) {
            assert!((o - (a + d)).norm() < 1e-12);
        }
    }

    #[test]
    fn collinear_neighbors_fall_back_to_translation() {
        let m: Vec<Vec3> = (0..5)
            .map(|i| Vec3::new(0.3 + 0.05 * i as f64, 0.5, 0.5))
            .collect();
        let a = vec![Vec3::new(0.4, 0.52, 0.5)];
        let b = bind_skin(&a, &m, 5).unwrap();
        let cur: Vec<Vec3> = m.iter().map(|x| x + Vec3::new(0.0, 0.0, 0.01)).collect();
        let out = skin_step(&b, &m, &cur, &a).unwrap();
        assert!((out[0] - (a[0] + Vec3::new(0.0, 0.0, 0.01))).norm() < 1e-15);
    }

    #[test]
    fn incremental_path_composes_steps() {
        let m0 = cloud(30, 8);
        let a0 = cloud(10, 9);
        let b = bind_skin(&a0, &m0, 8).unwrap();
        let m1: Vec<Vec3> = m0
            .iter()
            .map(|x| x + Vec3::new(0.0, 0.01 * x.x, 0.0))
            .collect();
        let m2: Vec<Vec3> = m1
            .iter()
            .map(|x| x + Vec3::new(0.02 * x.z, 0.0, 0.0))
            .collect();
        let frames = skin_trajectory(&b, &[&m0, &m1, &m2], &a0).unwrap();
        let a1 = skin_step(&b, &m0, &m1, &a0).unwrap();
        let a2 = skin_step(&b, &m1, &m2, &a1).unwrap();
        assert_eq!(frames, vec![a0, a1, a2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = cloud(5, 10);
        assert!(bind_skin(&m, &m, 0).is_err());
        assert!(bind_skin(&m, &m, 6).is_err());
        let b = bind_skin(&m, &m, 2).unwrap();
        assert!(skin_step(&b, &m, &m[..4], &m).is_err());
        assert!(skin_step(&b, &m, &m, &m[..3]).is_err());
    }

    proptest! {
        #[test]
        fn rigid_motion_is_reproduced(
            seed in 0u64..1000,
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            shift in prop::array::uniform3(-0.1f64..0.1),
        ) {
            let axis = Vec3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
            let t = Vec3::from(shift);
            let m = cloud(60, seed);
            let a = cloud(25, seed + 1);
            let b = bind_skin(&a, &m, DEFAULT_SKIN_NEIGHBORS).unwrap();
            for i in 0..b.len() {
                let s: f64 = b.weights_of(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(b.weights_of(i).iter().all(|&w| w >= 0.0));
            }
            let cur: Vec<Vec3> = m.iter().map(|x| rot * x + t).collect();
            let out = skin_step(&b, &m, &cur, &a).unwrap();
            for (o, a) in out.iter().zip(&a) {
                prop_assert!((o - (rot * a + t)).norm() < 1e-6);
            }
        }
    }
}
