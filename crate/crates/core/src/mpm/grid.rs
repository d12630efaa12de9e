//! Background grid and the three transfer phases of an MLS-MPM substep.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{is_finite_mat, is_finite_vec, Mat3, Vec3};
use crate::mpm::kernel::Stencil;
use crate::mpm::{ParticleState, SimConfig};

/// Dense node arrays over a `res³` grid, flattened as `(i·res + j)·res + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub resolution: usize,
    pub mass: Vec<f64>,
    pub momentum: Vec<Vec3>,
    pub velocity: Vec<Vec3>,
}

impl GridField {
    pub fn new(resolution: usize) -> Self {
        let n = resolution * resolution * resolution;
        GridField {
            resolution,
            mass: vec![0.0; n],
            momentum: vec![Vec3::zeros(); n],
            velocity: vec![Vec3::zeros(); n],
        }
    }

    pub fn clear(&mut self) {
        self.mass.fill(0.0);
        self.momentum.fill(Vec3::zeros());
        self.velocity.fill(Vec3::zeros());
    }

    #[inline]
    pub fn flat(&self, index: [usize; 3]) -> usize {
        (index[0] * self.resolution + index[1]) * self.resolution + index[2]
    }

    #[inline]
    pub fn unflat(&self, n: usize) -> [usize; 3] {
        let r = self.resolution;
        [n / (r * r), (n / r) % r, n % r]
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.momentum.iter().sum()
    }
}

/// `4 / dx²`, the inverse of the quadratic-kernel inertia tensor.
#[inline]
pub(crate) fn inv_inertia(cfg: &SimConfig) -> f64 {
    let r = cfg.grid_resolution as f64;
    4.0 * r * r
}

/// Affine momentum matrix `m C - δt V (4/dx²) P Fᵀ`.
#[inline]
pub(crate) fn affine(
    mass: f64,
    volume: f64,
    c: &Mat3,
    p: &Mat3,
    f: &Mat3,
    cfg: &SimConfig,
) -> Mat3 {
    c * mass - p * f.transpose() * (cfg.substep_dt * volume * inv_inertia(cfg))
}

/// Particles per parallel work item.
pub(crate) const PAR_MIN_LEN: usize = 256;

/// Whether the per-particle phases should fan out over the thread pool.
#[inline]
pub(crate) fn parallel() -> bool {
    rayon::current_num_threads() > 1
}

/// Lowest particle index flagged in `slot`, if any.
pub(crate) fn flagged(slot: &AtomicUsize) -> Option<usize> {
    let p = slot.load(Ordering::Relaxed);
    (p != usize::MAX).then_some(p)
}

/// Per-particle scatter inputs: stencil, affine momentum and momentum.
pub(crate) type ScatterItem = (Stencil, Mat3, Vec3);

/// Adds one particle's contributions to the nodes of x-slab `lo..hi`,
/// whose arrays start at node plane `lo`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn scatter_particle(
    (st, a, mv): &ScatterItem,
    m: f64,
    mass: &mut [f64],
    mom: &mut [Vec3],
    lo: usize,
    hi: usize,
    res: usize,
    dx: f64,
) {
    for i in 0..3 {
        let gx = st.base[0] + i;
        if gx < lo || gx >= hi {
            continue;
        }
        for j in 0..3 {
            for k in 0..3 {
                let w = st.weight(i, j, k);
                let n = ((gx - lo) * res + st.base[1] + j) * res + st.base[2] + k;
                mass[n] += w * m;
                mom[n] += w * (mv + a * st.offset(i, j, k, dx));
            }
        }
    }
}

/// Scatters particle mass and momentum onto a zeroed grid.
///
/// With several threads the grid is split into slabs along x, each slab
/// visiting particles in index order, so every node accumulates in the
/// same order whatever the thread count.
pub fn p2g(
    state: &ParticleState,
    stresses: &[Mat3],
    grid: &mut GridField,
    cfg: &SimConfig,
) -> Result<()> {
    p2g_with(state, stresses, grid, cfg, &mut Vec::new())
}

/// [`p2g`] with a caller-owned scratch buffer.
pub(crate) fn p2g_with(
    state: &ParticleState,
    stresses: &[Mat3],
    grid: &mut GridField,
    cfg: &SimConfig,
    items: &mut Vec<ScatterItem>,
) -> Result<()> {
    if stresses.len() != state.len() {
        return Err(Error::arg("one stress per particle required"));
    }
    if grid.resolution != cfg.grid_resolution {
        return Err(Error::arg(
            "grid resolution does not match the solver config",
        ));
    }
    let res = cfg.grid_resolution;
    let dx = cfg.dx();
    if let Some(p) = stresses.iter().position(|s| !is_finite_mat(s)) {
        return Err(Error::Numerical {
            particle: p,
            what: "non-finite stress".into(),
        });
    }
    let item = |p: usize| -> Result<ScatterItem> {
        let st = Stencil::new(&state.x[p], res, p)?;
        let m = state.mass[p];
        let a = affine(
            m,
            state.volume[p],
            &state.c[p],
            &stresses[p],
            &state.f[p],
            cfg,
        );
        Ok((st, a, state.v[p] * m))
    };
    if !parallel() {
        for p in 0..state.len() {
            let it = item(p)?;
            scatter_particle(
                &it,
                state.mass[p],
                &mut grid.mass,
                &mut grid.momentum,
                0,
                res,
                res,
                dx,
            );
        }
        return Ok(());
    }
    items.resize(
        state.len(),
        (Stencil::default(), Mat3::zeros(), Vec3::zeros()),
    );
    let outside = AtomicUsize::new(usize::MAX);
    items
        .par_iter_mut()
        .with_min_len(PAR_MIN_LEN)
        .enumerate()
        .for_each(|(p, slot)| match item(p) {
            Ok(it) => *slot = it,
            Err(_) => {
                outside.fetch_min(p, Ordering::Relaxed);
            }
        });
    if let Some(p) = flagged(&outside) {
        return item(p).map(|_| ());
    }
    let items = &*items;
    let slabs = rayon::current_num_threads().clamp(1, res);
    let bounds: Vec<usize> = (0..=slabs).map(|s| s * res / slabs).collect();
    let plane = res * res;
    let mut parts = Vec::with_capacity(slabs);
    let (mut mass, mut mom) = (grid.mass.as_mut_slice(), grid.momentum.as_mut_slice());
    for w in bounds.windows(2) {
        let (m_head, m_tail) = mass.split_at_mut((w[1] - w[0]) * plane);
        let (p_head, p_tail) = mom.split_at_mut((w[1] - w[0]) * plane);
        parts.push((w[0], w[1], m_head, p_head));
        mass = m_tail;
        mom = p_tail;
    }
    parts.into_par_iter().for_each(|(lo, hi, mass, mom)| {
        for (p, it) in items.iter().enumerate() {
            let bx = it.0.base[0];
            if bx + 2 >= lo && bx < hi {
                scatter_particle(it, state.mass[p], mass, mom, lo, hi, res, dx);
            }
        }
    });
    Ok(())
}

/// Which velocity components of a boundary node survive projection.
#[inline]
pub(crate) fn boundary_keep(index: [usize; 3], v: &Vec3, cfg: &SimConfig) -> [bool; 3] {
    let dx = cfg.dx();
    let mut keep = [true; 3];
    if index[2] as f64 * dx <= cfg.floor_height() {
        keep[0] = false;
        keep[1] = false;
        keep[2] = v[2] > 0.0;
    }
    for a in 0..3 {
        let pos = index[a] as f64 * dx;
        if (pos < cfg.clip_min && v[a] < 0.0) || (pos > cfg.clip_max && v[a] > 0.0) {
            keep[a] = false;
        }
    }
    keep
}

/// Momentum to velocity, gravity, damping and boundary projection.
pub fn grid_update(grid: &mut GridField, cfg: &SimConfig) {
    let g = Vec3::from(cfg.gravity) * cfg.substep_dt;
    for n in 0..grid.mass.len() {
        let m = grid.mass[n];
        if m <= 0.0 {
            grid.velocity[n] = Vec3::zeros();
            continue;
        }
        let mut v = (grid.momentum[n] / m + g) * cfg.grid_velocity_damping;
        let keep = boundary_keep(grid.unflat(n), &v, cfg);
        for a in 0..3 {
            if !keep[a] {
                v[a] = 0.0;
            }
        }
        grid.velocity[n] = v;
    }
}

/// `(I + δt C) F` whose singular values all lie in `[lo, hi]` can skip the
/// decomposition. Uses `σ_max² ≤ ‖FᵀF‖` and `σ_min² ≥ 4 det(FᵀF) / tr(FᵀF)²`.
#[inline]
pub(crate) fn clamp_inactive(f: &Mat3, lo: f64, hi: f64) -> bool {
    let det = f.determinant();
    if !(det > 0.0) {
        return false;
    }
    let ftf = f.transpose() * f;
    let tr = ftf.trace();
    ftf.norm() <= hi * hi && 4.0 * det * det >= lo * lo * tr * tr
}

/// Projects the singular values of `F` into `[lo, hi]`, keeping both
/// rotation factors. Inverted elements are un-inverted.
pub fn clamp_singular_values(f: &Mat3, lo: f64, hi: f64) -> Mat3 {
    if clamp_inactive(f, lo, hi) {
        return *f;
    }
    let svd = crate::math::RotSvd::new(f);
    svd.compose(&svd.sigma.map(|s| s.clamp(lo, hi)))
}

/// Pullback of `G` through [`clamp_singular_values`].
pub fn clamp_singular_values_vjp(f: &Mat3, lo: f64, hi: f64, g: &Mat3) -> Mat3 {
    if clamp_inactive(f, lo, hi) {
        return *g;
    }
    let svd = crate::math::RotSvd::new(f);
    let values = svd.sigma.map(|s| s.clamp(lo, hi));
    let slopes = svd.sigma.map(|s| if s > lo && s < hi { 1.0 } else { 0.0 });
    crate::math::spectral_vjp(&svd, &values, &slopes, g)
}

/// Gathers grid velocities back to particles and advances `x`, `F`, `C`.
pub fn g2p(grid: &GridField, state: &mut ParticleState, cfg: &SimConfig) -> Result<()> {
    let res = cfg.grid_resolution;
    let dx = cfg.dx();
    let k = inv_inertia(cfg);
    let dt = cfg.substep_dt;
    let decay = (-cfg.particle_damping * dt).exp();
    let outside = AtomicUsize::new(usize::MAX);
    let non_finite = AtomicUsize::new(usize::MAX);
    let gather = |p: usize, (xp, vp, fp, cp): (&mut Vec3, &mut Vec3, &mut Mat3, &mut Mat3)| {
        let Ok(st) = Stencil::new(xp, res, p) else {
            outside.fetch_min(p, Ordering::Relaxed);
            return;
        };
        let mut v = Vec3::zeros();
        let mut b = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                for kk in 0..3 {
                    let w = st.weight(i, j, kk);
                    let vg = grid.velocity[st.flat_node(i, j, kk, res)];
                    v += w * vg;
                    b += (w * vg) * st.offset(i, j, kk, dx).transpose();
                }
            }
        }
        if !is_finite_vec(&v) {
            non_finite.fetch_min(p, Ordering::Relaxed);
            return;
        }
        let c = b * k;
        let x = *xp + v * dt;
        *xp = x.map(|s| s.clamp(cfg.clip_min, cfg.clip_max));
        let fu = (Mat3::identity() + c * dt) * *fp;
        *fp = clamp_singular_values(&fu, cfg.svd_clamp_min, cfg.svd_clamp_max);
        *cp = c;
        *vp = v * decay;
    };
    let fields = (&mut state.x, &mut state.v, &mut state.f, &mut state.c);
    if parallel() {
        (
            fields.0.par_iter_mut(),
            fields.1.par_iter_mut(),
            fields.2.par_iter_mut(),
            fields.3.par_iter_mut(),
        )
            .into_par_iter()
            .with_min_len(PAR_MIN_LEN)
            .enumerate()
            .for_each(|(p, item)| gather(p, item));
    } else {
        let it = fields
            .0
            .iter_mut()
            .zip(fields.1.iter_mut())
            .zip(fields.2.iter_mut())
            .zip(fields.3.iter_mut());
        for (p, (((x, v), f), c)) in it.enumerate() {
            gather(p, (x, v, f, c));
        }
    }
    match (flagged(&outside), flagged(&non_finite)) {
        (Some(p), q) if q.is_none_or(|q| p < q) => {
            Err(Stencil::new(&state.x[p], res, p).expect_err("flagged particle"))
        }
        (_, Some(p)) => Err(Error::Numerical {
            particle: p,
            what: "non-finite grid velocity".into(),
        }),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_g() -> SimConfig {
        SimConfig {
            gravity: [0.0; 3],
            particle_damping: 0.0,
            grid_velocity_damping: 1.0,
            ..SimConfig::default()
        }
    }

    fn blob(n: usize) -> ParticleState {
        let mut x = Vec::new();
        for p in 0..n {
            let t = p as f64;
            x.push(Vec3::new(
                0.4 + 0.2 * (t * 0.37).fract(),
                0.4 + 0.2 * (t * 0.61).fract(),
                0.4 + 0.2 * (t * 0.83).fract(),
            ));
        }
        let mut s = ParticleState::at_rest(x, 1e-6, 1000.0).unwrap();
        for p in 0..n {
            let t = p as f64;
            s.v[p] = Vec3::new((t * 0.3).sin(), (t * 0.7).cos(), 0.2 * t.sin());
            s.c[p] = Mat3::new(0.1, -0.2, 0.0, 0.05, 0.3, 0.1, -0.1, 0.0, 0.2) * (t * 0.1).cos();
        }
        s
    }

    #[test]
    fn scatter_conserves_mass_and_momentum() {
        let cfg = SimConfig::default();
        let s = blob(200);
        let mut grid = GridField::new(32);
        p2g(&s, &vec![Mat3::zeros(); s.len()], &mut grid, &cfg).unwrap();
        let rel = (grid.total_mass() - s.total_mass()).abs() / s.total_mass();
        assert!(rel < 1e-12, "{rel}");
        let dm = (grid.total_momentum() - s.momentum()).norm() / s.momentum().norm();
        assert!(dm < 1e-12, "{dm}");
    }

    #[test]
    fn hand_summed_node_masses() {
        let cfg = SimConfig::default();
        let dx = cfg.dx();
        let x = vec![
            Vec3::new(10.0 * dx, 10.0 * dx, 10.0 * dx),
            Vec3::new(10.75 * dx, 10.0 * dx, 10.0 * dx),
        ];
        let s = ParticleState::at_rest(x, 1.0, 1.0).unwrap();
        let mut grid = GridField::new(32);
        p2g(&s, &[Mat3::zeros(); 2], &mut grid, &cfg).unwrap();
        // x-axis weights: first particle (1/8, 3/4, 1/8) on nodes 9..11,
        // second at fx = 0.75 gives (9/32, 11/16, 1/32) on nodes 10..12.
        let yz = 0.75 * 0.75;
        let expect = [
            (9, 0.125),
            (10, 0.75 + 0.28125),
            (11, 0.125 + 0.6875),
            (12, 0.03125),
        ];
        for (i, e) in expect {
            let m = grid.mass[grid.flat([i, 10, 10])];
            assert!((m - e * yz).abs() < 1e-14, "node {i}: {m}");
        }
    }

    #[test]
    fn stationary_particle_has_no_momentum() {
        let cfg = zero_g();
        let s = ParticleState::at_rest(vec![Vec3::repeat(0.5)], 1e-6, 1000.0).unwrap();
        let mut grid = GridField::new(32);
        p2g(&s, &[Mat3::zeros()], &mut grid, &cfg).unwrap();
        assert_eq!(grid.total_momentum(), Vec3::zeros());
    }

    #[test]
    fn free_node_gravity() {
        let cfg = SimConfig::default();
        let mut grid = GridField::new(32);
        let n = grid.flat([16, 16, 16]);
        grid.mass[n] = 1.0;
        let empty = grid.flat([20, 20, 20]);
        grid_update(&mut grid, &cfg);
        let expect = -9.8 * 8e-4 * 0.999;
        assert!((grid.velocity[n][2] - expect).abs() < 1e-15);
        assert_eq!(grid.velocity[empty], Vec3::zeros());
    }

    #[test]
    fn floor_and_walls_project() {
        let cfg = SimConfig::default();
        let mut grid = GridField::new(32);
        let floor = grid.flat([16, 16, 1]);
        let wall = grid.flat([31, 16, 16]);
        let up = grid.flat([16, 16, 0]);
        for (n, v) in [
            (floor, Vec3::new(0.3, 0.2, -1.0)),
            (wall, Vec3::new(1.0, 0.5, 0.0)),
            (up, Vec3::new(0.0, 0.0, 1.0)),
        ] {
            grid.mass[n] = 1.0;
            grid.momentum[n] = v;
        }
        let cfg = SimConfig {
            gravity: [0.0; 3],
            grid_velocity_damping: 1.0,
            ..cfg
        };
        grid_update(&mut grid, &cfg);
        assert_eq!(grid.velocity[floor], Vec3::zeros());
        assert_eq!(grid.velocity[wall], Vec3::new(0.0, 0.5, 0.0));
        assert_eq!(grid.velocity[up], Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn uniform_field_gathers_exactly() {
        let cfg = zero_g();
        let mut grid = GridField::new(32);
        let u = Vec3::new(0.3, -0.1, 0.2);
        grid.velocity.fill(u);
        let mut s = blob(50);
        g2p(&grid, &mut s, &cfg).unwrap();
        for p in 0..s.len() {
            assert!((s.v[p] - u).norm() < 1e-13);
            assert!(s.c[p].norm() < 1e-10);
        }
    }

    #[test]
    fn transfer_round_trip_keeps_momentum() {
        let cfg = zero_g();
        let mut s = blob(300);
        let before = s.momentum();
        let mut grid = GridField::new(32);
        p2g(&s, &vec![Mat3::zeros(); s.len()], &mut grid, &cfg).unwrap();
        grid_update(&mut grid, &cfg);
        g2p(&grid, &mut s, &cfg).unwrap();
        let rel = (s.momentum() - before).norm() / before.norm();
        assert!(rel < 1e-10, "{rel}");
    }

    #[test]
    fn clamp_keeps_rotations() {
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 0.9).into_inner();
        let q = nalgebra::Rotation3::from_euler_angles(-0.5, 0.1, 0.4).into_inner();
        let f = r * Mat3::from_diagonal(&Vec3::new(3.0, 1.0, 0.8)) * q.transpose();
        let out = clamp_singular_values(&f, 0.5, 2.0);
        let expect = r * Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 0.8)) * q.transpose();
        assert!((out - expect).norm() < 1e-12);
        let inside = r * Mat3::from_diagonal(&Vec3::new(1.9, 0.6, 1.2)) * q.transpose();
        assert!((clamp_singular_values(&inside, 0.5, 2.0) - inside).norm() < 1e-12);
    }

    #[test]
    fn clamp_vjp_matches_finite_differences() {
        let f = Mat3::new(2.4, 0.3, -0.1, 0.2, 0.4, 0.1, 0.05, -0.2, 1.1);
        let g = Mat3::new(0.3, -0.7, 0.2, 0.1, 0.5, -0.4, 0.9, 0.2, -0.3);
        let an = clamp_singular_values_vjp(&f, 0.5, 2.0, &g);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut fp = f;
                fp[(i, j)] += h;
                let mut fm = f;
                fm[(i, j)] -= h;
                let d = crate::math::ddot(
                    &g,
                    &(clamp_singular_values(&fp, 0.5, 2.0) - clamp_singular_values(&fm, 0.5, 2.0)),
                ) / (2.0 * h);
                assert!(
                    (d - an[(i, j)]).abs() < 1e-6,
                    "({i},{j}) {d} vs {}",
                    an[(i, j)]
                );
            }
        }
    }

    #[test]
    fn inactive_test_is_conservative() {
        for s in [[1.0, 1.0, 1.0], [1.99, 0.51, 1.0], [1.5, 1.5, 0.7]] {
            let f = Mat3::from_diagonal(&Vec3::from(s));
            let direct = clamp_inactive(&f, 0.5, 2.0);
            if direct {
                assert_eq!(clamp_singular_values(&f, 0.5, 2.0), f);
            }
        }
        assert!(!clamp_inactive(
            &Mat3::from_diagonal(&Vec3::new(2.1, 1.0, 1.0)),
            0.5,
            2.0
        ));
        assert!(!clamp_inactive(
            &Mat3::from_diagonal(&Vec3::new(1.0, 0.4, 1.0)),
            0.5,
            2.0
        ));
        assert!(!clamp_inactive(
            &Mat3::from_diagonal(&Vec3::new(1.0, -1.0, 1.0)),
            0.5,
            2.0
        ));
    }
}
