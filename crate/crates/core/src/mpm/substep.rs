//! One MLS-MPM substep and its hand-derived adjoint.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::actuation::{SubstepDrive, VelocityUpdate};
use crate::error::{Error, Result};
use crate::material::{mixed_stress, mixed_stress_vjp, ParticleMaterial, ParticleMaterialGrad};
use crate::math::{Mat3, Vec3};
use crate::mpm::grid::{
    affine, boundary_keep, clamp_singular_values_vjp, flagged, g2p, grid_update, inv_inertia,
    p2g_with, parallel, GridField, ScatterItem, PAR_MIN_LEN,
};
use crate::mpm::kernel::Stencil;
use crate::mpm::{ParticleState, SimConfig};

/// Cotangent of a [`ParticleState`] (mass and volume are not differentiated).
#[derive(Debug, Clone, PartialEq)]
pub struct StateAdjoint {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub f: Vec<Mat3>,
    pub c: Vec<Mat3>,
}

impl StateAdjoint {
    pub fn zeros(n: usize) -> Self {
        StateAdjoint {
            x: vec![Vec3::zeros(); n],
            v: vec![Vec3::zeros(); n],
            f: vec![Mat3::zeros(); n],
            c: vec![Mat3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.x.iter().all(|a| *a == Vec3::zeros())
            && self.v.iter().all(|a| *a == Vec3::zeros())
            && self.f.iter().all(|a| *a == Mat3::zeros())
            && self.c.iter().all(|a| *a == Mat3::zeros())
    }

    pub fn clear(&mut self) {
        self.x.fill(Vec3::zeros());
        self.v.fill(Vec3::zeros());
        self.f.fill(Mat3::zeros());
        self.c.fill(Mat3::zeros());
    }
}

/// Reusable buffers for forward and backward substeps.
#[derive(Debug, Clone)]
pub struct Solver {
    pub cfg: SimConfig,
    grid: GridField,
    stress: Vec<Mat3>,
    updates: Vec<VelocityUpdate>,
    moved: Option<ParticleState>,
    scatter: Vec<ScatterItem>,
    grid_v_bar: Vec<Vec3>,
    grid_mom_bar: Vec<Vec3>,
    grid_mass_bar: Vec<f64>,
}

impl Solver {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let res = cfg.grid_resolution;
        let nodes = res * res * res;
        Ok(Solver {
            grid: GridField::new(res),
            cfg,
            stress: Vec::new(),
            updates: Vec::new(),
            moved: None,
            scatter: Vec::new(),
            grid_v_bar: vec![Vec3::zeros(); nodes],
            grid_mom_bar: vec![Vec3::zeros(); nodes],
            grid_mass_bar: vec![0.0; nodes],
        })
    }

    /// Grid state left by the most recent substep.
    pub fn grid(&self) -> &GridField {
        &self.grid
    }

    fn prepare(
        &mut self,
        state: &ParticleState,
        materials: &[ParticleMaterial],
        drive: &SubstepDrive,
    ) -> Result<()> {
        if materials.len() != state.len() {
            return Err(Error::arg(format!(
                "{} particle materials for {} particles",
                materials.len(),
                state.len()
            )));
        }
        let n = state.len();
        self.stress.resize(n, Mat3::zeros());
        self.updates.resize(n, VelocityUpdate::IDENTITY);
        let moved = self.moved.get_or_insert_with(|| state.clone());
        moved.clone_from(state);
        let failed = AtomicUsize::new(usize::MAX);
        let eval = |p: usize, (stress, update, v): (&mut Mat3, &mut VelocityUpdate, &mut Vec3)| {
            match mixed_stress(&state.f[p], &materials[p], p) {
                Ok(s) => *stress = s,
                Err(_) => {
                    failed.fetch_min(p, Ordering::Relaxed);
                }
            }
            *update = drive.update(p);
            *v = update.apply(&state.x[p], &state.v[p]);
        };
        if parallel() {
            (
                self.stress.par_iter_mut(),
                self.updates.par_iter_mut(),
                moved.v.par_iter_mut(),
            )
                .into_par_iter()
                .with_min_len(PAR_MIN_LEN)
                .enumerate()
                .for_each(|(p, item)| eval(p, item));
        } else {
            let it = self
                .stress
                .iter_mut()
                .zip(self.updates.iter_mut())
                .zip(moved.v.iter_mut());
            for (p, ((s, u), v)) in it.enumerate() {
                eval(p, (s, u, v));
            }
        }
        if let Some(p) = flagged(&failed) {
            return Err(mixed_stress(&state.f[p], &materials[p], p).expect_err("flagged particle"));
        }
        self.grid.clear();
        p2g_with(
            moved,
            &self.stress,
            &mut self.grid,
            &self.cfg,
            &mut self.scatter,
        )?;
        grid_update(&mut self.grid, &self.cfg);
        Ok(())
    }

    /// Advances `state` by one substep: stress, forcing, scatter, grid
    /// update, gather.
    pub fn substep(
        &mut self,
        state: &mut ParticleState,
        materials: &[ParticleMaterial],
        drive: &SubstepDrive,
    ) -> Result<()> {
        self.prepare(state, materials, drive)?;
        let moved = self.moved.as_mut().expect("prepared");
        g2p(&self.grid, moved, &self.cfg)?;
        for p in 0..moved.len() {
            if let Some(v) = drive.pinned_velocity(p) {
                moved.v[p] = v;
                moved.x[p] = state.x[p] + v * self.cfg.substep_dt;
            }
        }
        let limit = self.cfg.divergence_speed();
        if let Some(p) = moved.v.iter().position(|v| !(v.norm() <= limit)) {
            return Err(Error::Numerical {
                particle: p,
                what: format!(
                    "speed {:.1} m/s exceeds the {limit:.1} m/s stability limit",
                    moved.v[p].norm()
                ),
            });
        }
        std::mem::swap(state, moved);
        Ok(())
    }

    /// Replaces `adj` (cotangent of the state after the substep starting
    /// at `start`) with the cotangent of `start`, and accumulates the
    /// material cotangents into `material_grads`.
    pub fn substep_backward(
        &mut self,
        start: &ParticleState,
        materials: &[ParticleMaterial],
        drive: &SubstepDrive,
        adj: &mut StateAdjoint,
        material_grads: &mut [ParticleMaterialGrad],
    ) -> Result<()> {
        self.prepare(start, materials, drive)?;
        let cfg = &self.cfg;
        let res = cfg.grid_resolution;
        let dx = cfg.dx();
        let k = inv_inertia(cfg);
        let dt = cfg.substep_dt;
        let decay = (-cfg.particle_damping * dt).exp();
        let (lo, hi) = (cfg.svd_clamp_min, cfg.svd_clamp_max);
        let moved = self.moved.as_ref().expect("prepared");
        let n = start.len();
        let gv = &self.grid.velocity;

        // Gather.
        self.grid_v_bar.fill(Vec3::zeros());
        let mut stencils = Vec::with_capacity(n);
        for p in 0..n {
            let st = Stencil::new(&start.x[p], res, p)?;
            let mut v = Vec3::zeros();
            let mut b = Mat3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    for kk in 0..3 {
                        let w = st.weight(i, j, kk);
                        let vg = gv[st.flat_node(i, j, kk, res)];
                        v += w * vg;
                        b += (w * vg) * st.offset(i, j, kk, dx).transpose();
                    }
                }
            }
            let c_new = b * k;
            let x_u = start.x[p] + v * dt;
            let f = &start.f[p];
            let step = Mat3::identity() + c_new * dt;
            let f_u = step * f;

            let pinned = drive.pinned_velocity(p).is_some();
            let direct = if pinned { adj.x[p] } else { Vec3::zeros() };
            let mut x_u_bar = if pinned { Vec3::zeros() } else { adj.x[p] };
            for a in 0..3 {
                if x_u[a] < cfg.clip_min || x_u[a] > cfg.clip_max {
                    x_u_bar[a] = 0.0;
                }
            }
            let v_new_bar = if pinned {
                Vec3::zeros()
            } else {
                adj.v[p] * decay + x_u_bar * dt
            };
            let f_u_bar = clamp_singular_values_vjp(&f_u, lo, hi, &adj.f[p]);
            let c_new_bar = adj.c[p] + f_u_bar * f.transpose() * dt;
            adj.f[p] = step.transpose() * f_u_bar;
            let mut x_bar = x_u_bar;
            let kc = c_new_bar * k;
            let kct = kc.transpose();
            for i in 0..3 {
                for j in 0..3 {
                    for kk in 0..3 {
                        let w = st.weight(i, j, kk);
                        let node = st.flat_node(i, j, kk, res);
                        let vg = gv[node];
                        let off = st.offset(i, j, kk, dx);
                        let kc_off = kc * off;
                        self.grid_v_bar[node] += w * (v_new_bar + kc_off);
                        x_bar += st.weight_grad(i, j, kk) * (v_new_bar.dot(&vg) + vg.dot(&kc_off));
                        x_bar -= w * (kct * vg);
                    }
                }
            }
            adj.x[p] = x_bar + direct;
            stencils.push(st);
        }

        // Grid update.
        let g = Vec3::from(cfg.gravity) * dt;
        for node in 0..self.grid.mass.len() {
            let m = self.grid.mass[node];
            if m <= 0.0 {
                self.grid_mom_bar[node] = Vec3::zeros();
                self.grid_mass_bar[node] = 0.0;
                continue;
            }
            let v_raw = self.grid.momentum[node] / m;
            let pre = (v_raw + g) * cfg.grid_velocity_damping;
            let keep = boundary_keep(self.grid.unflat(node), &pre, cfg);
            let mut raw_bar = self.grid_v_bar[node] * cfg.grid_velocity_damping;
            for a in 0..3 {
                if !keep[a] {
                    raw_bar[a] = 0.0;
                }
            }
            self.grid_mom_bar[node] = raw_bar / m;
            self.grid_mass_bar[node] = -raw_bar.dot(&v_raw) / m;
        }

        // Scatter, stress and forcing.
        for p in 0..n {
            let st = &stencils[p];
            let m = start.mass[p];
            let vol = start.volume[p];
            let f = &start.f[p];
            let stress = &self.stress[p];
            let a = affine(m, vol, &start.c[p], stress, f, cfg);
            let mv = moved.v[p] * m;
            let mut w_mom = Vec3::zeros();
            let mut a_bar = Mat3::zeros();
            let mut x_bar = Vec3::zeros();
            let at = a.transpose();
            for i in 0..3 {
                for j in 0..3 {
                    for kk in 0..3 {
                        let w = st.weight(i, j, kk);
                        let node = st.flat_node(i, j, kk, res);
                        let gm = self.grid_mom_bar[node];
                        let off = st.offset(i, j, kk, dx);
                        w_mom += w * gm;
                        a_bar += (w * gm) * off.transpose();
                        x_bar += st.weight_grad(i, j, kk)
                            * (m * self.grid_mass_bar[node] + gm.dot(&(mv + a * off)));
                        x_bar -= w * (at * gm);
                    }
                }
            }
            let v_moved_bar = w_mom * m;
            adj.c[p] = a_bar * m;
            let kv = dt * vol * k;
            let p_bar = -(a_bar * f) * kv;
            let (f_bar_stress, mat_bar) = mixed_stress_vjp(f, &materials[p], &p_bar, p)?;
            adj.f[p] += -(a_bar.transpose() * stress) * kv + f_bar_stress;
            material_grads[p] += mat_bar;
            let u = &self.updates[p];
            adj.v[p] = u.cv.component_mul(&v_moved_bar);
            adj.x[p] += x_bar + u.cx.component_mul(&v_moved_bar);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuation::{bind_actuators, CouplingMode, DcaGains, Drive, FrameAction};
    use crate::math::ddot;

    fn sample_state() -> ParticleState {
        let x = vec![
            Vec3::new(0.47, 0.52, 0.5),
            Vec3::new(0.5, 0.49, 0.52),
            Vec3::new(0.53, 0.5, 0.48),
            Vec3::new(0.5, 0.53, 0.51),
        ];
        let mut s = ParticleState::at_rest(x, 2e-5, 1000.0).unwrap();
        for p in 0..s.len() {
            let t = p as f64 + 1.0;
            s.v[p] = Vec3::new(0.2 * t.sin(), -0.3 * t.cos(), 0.1);
            s.f[p] = Mat3::identity()
                + Mat3::new(0.05, 0.02, -0.01, 0.0, -0.04, 0.03, 0.01, 0.02, 0.06) * t.cos();
            s.c[p] = Mat3::new(0.3, -0.1, 0.2, 0.1, 0.0, -0.2, 0.05, 0.1, -0.3) * t.sin();
        }
        s
    }

    fn materials(n: usize) -> Vec<ParticleMaterial> {
        (0..n)
            .map(|p| ParticleMaterial {
                e: 3e4,
                nu: 0.3,
                weights: [0.5, 0.3, 0.2 + 0.0 * p as f64],
            })
            .collect()
    }

    fn seeds(n: usize) -> StateAdjoint {
        let mut a = StateAdjoint::zeros(n);
        for p in 0..n {
            let t = p as f64 + 0.5;
            a.x[p] = Vec3::new(t.sin(), t.cos(), 0.3);
            a.v[p] = Vec3::new(0.1, -0.2 * t, 0.05);
            a.f[p] = Mat3::new(0.2, -0.1, 0.3, 0.0, 0.1, -0.2, 0.4, 0.1, 0.0) * t;
            a.c[p] = Mat3::new(0.01, 0.02, 0.0, -0.01, 0.0, 0.03, 0.02, 0.0, -0.01);
        }
        a
    }

    fn objective(s: &ParticleState, a: &StateAdjoint) -> f64 {
        (0..s.len())
            .map(|p| {
                a.x[p].dot(&s.x[p])
                    + a.v[p].dot(&s.v[p])
                    + ddot(&a.f[p], &s.f[p])
                    + ddot(&a.c[p], &s.c[p])
            })
            .sum()
    }

    #[test]
    fn state_cotangent_matches_finite_differences() {
        check_state_cotangent(&Drive::none());
    }

    #[test]
    fn pinned_particles_backpropagate() {
        let s0 = sample_state();
        let anchors = [s0.x[0] + Vec3::new(0.005, 0.0, 0.0)];
        let binding = bind_actuators(&s0.x, &anchors, 0.02).unwrap();
        assert_eq!(binding.coupled_particles(), 1);
        let action = FrameAction {
            start: anchors.to_vec(),
            end: vec![anchors[0] + Vec3::new(0.0, 0.0, 0.01)],
        };
        let drive =
            Drive::compliant(&binding, DcaGains::default(), &action).with_mode(CouplingMode::Rigid);
        let cfg = SimConfig::default();
        let sd = drive.substep(3, &cfg);
        let mut s = s0.clone();
        Solver::new(cfg.clone())
            .unwrap()
            .substep(&mut s, &materials(s0.len()), &sd)
            .unwrap();
        let v = action.at_substep(3, &cfg).velocities[0];
        assert_eq!(s.v[0], v);
        assert_eq!(s.x[0], s0.x[0] + v * cfg.substep_dt);
        check_state_cotangent(&drive);
    }

    fn check_state_cotangent(drive: &Drive) {
        let cfg = SimConfig::default();
        let mut solver = Solver::new(cfg.clone()).unwrap();
        let s0 = sample_state();
        let mats = materials(s0.len());
        let sd = drive.substep(3, &cfg);
        let seed = seeds(s0.len());
        let mut adj = seed.clone();
        let mut mg = vec![ParticleMaterialGrad::default(); s0.len()];
        solver
            .substep_backward(&s0, &mats, &sd, &mut adj, &mut mg)
            .unwrap();

        let mut eval = |s: &ParticleState| {
            let mut s = s.clone();
            solver.substep(&mut s, &mats, &sd).unwrap();
            objective(&s, &seed)
        };
        let h = 1e-7;
        for p in 0..s0.len() {
            for a in 0..3 {
                let mut sp = s0.clone();
                sp.x[p][a] += h;
                let mut sm = s0.clone();
                sm.x[p][a] -= h;
                let d = (eval(&sp) - eval(&sm)) / (2.0 * h);
                assert!(
                    (d - adj.x[p][a]).abs() < 1e-4 * (1.0 + d.abs()),
                    "x[{p}][{a}] {d} vs {}",
                    adj.x[p][a]
                );
                let mut sp = s0.clone();
                sp.v[p][a] += h;
                let mut sm = s0.clone();
                sm.v[p][a] -= h;
                let d = (eval(&sp) - eval(&sm)) / (2.0 * h);
                assert!(
                    (d - adj.v[p][a]).abs() < 1e-5 * (1.0 + d.abs()),
                    "v[{p}][{a}] {d} vs {}",
                    adj.v[p][a]
                );
            }
            for i in 0..3 {
                for j in 0..3 {
                    let mut sp = s0.clone();
                    sp.f[p][(i, j)] += h;
                    let mut sm = s0.clone();
                    sm.f[p][(i, j)] -= h;
                    let d = (eval(&sp) - eval(&sm)) / (2.0 * h);
                    assert!(
                        (d - adj.f[p][(i, j)]).abs() < 1e-4 * (1.0 + d.abs()),
                        "F[{p}] {d} vs {}",
                        adj.f[p][(i, j)]
                    );
                    let mut sp = s0.clone();
                    sp.c[p][(i, j)] += h;
                    let mut sm = s0.clone();
                    sm.c[p][(i, j)] -= h;
                    let d = (eval(&sp) - eval(&sm)) / (2.0 * h);
                    assert!(
                        (d - adj.c[p][(i, j)]).abs() < 1e-5 * (1.0 + d.abs()),
                        "C[{p}] {d} vs {}",
                        adj.c[p][(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn material_cotangent_matches_finite_differences() {
        let cfg = SimConfig::default();
        let mut solver = Solver::new(cfg.clone()).unwrap();
        let s0 = sample_state();
        let mats = materials(s0.len());
        let drive = Drive::none();
        let sd = drive.substep(0, &cfg);
        let seed = seeds(s0.len());
        let mut adj = seed.clone();
        let mut mg = vec![ParticleMaterialGrad::default(); s0.len()];
        solver
            .substep_backward(&s0, &mats, &sd, &mut adj, &mut mg)
            .unwrap();
        let mut eval = |m: &[ParticleMaterial]| {
            let mut s = s0.clone();
            solver.substep(&mut s, m, &sd).unwrap();
            objective(&s, &seed)
        };
        for p in 0..s0.len() {
            let h = 1.0;
            let mut mp = mats.clone();
            mp[p].e += h;
            let mut mm = mats.clone();
            mm[p].e -= h;
            let d = (eval(&mp) - eval(&mm)) / (2.0 * h);
            assert!(
                (d - mg[p].e).abs() < 1e-5 * d.abs().max(1e-9),
                "E[{p}] {d} vs {}",
                mg[p].e
            );
            let h = 1e-6;
            let mut mp = mats.clone();
            mp[p].nu += h;
            let mut mm = mats.clone();
            mm[p].nu -= h;
            let d = (eval(&mp) - eval(&mm)) / (2.0 * h);
            assert!(
                (d - mg[p].nu).abs() < 1e-4 * d.abs().max(1e-6),
                "nu[{p}] {d} vs {}",
                mg[p].nu
            );
        }
    }

    #[test]
    fn forcing_cotangent_passes_through_coefficients() {
        use crate::actuation::{bind_actuators, DcaGains, FrameAction};
        let cfg = SimConfig::default();
        let mut solver = Solver::new(cfg.clone()).unwrap();
        let s0 = sample_state();
        let anchors = vec![Vec3::new(0.48, 0.52, 0.5)];
        let binding = bind_actuators(&s0.x, &anchors, 0.05).unwrap();
        assert!(binding.coupled_particles() > 0);
        let action = FrameAction {
            start: anchors.clone(),
            end: vec![anchors[0] + Vec3::new(0.0, 0.0, 0.01)],
        };
        let drive = Drive::compliant(&binding, DcaGains::default(), &action);
        let sd = drive.substep(5, &cfg);
        let mats = materials(s0.len());
        let seed = seeds(s0.len());
        let mut adj = seed.clone();
        let mut mg = vec![ParticleMaterialGrad::default(); s0.len()];
        solver
            .substep_backward(&s0, &mats, &sd, &mut adj, &mut mg)
            .unwrap();
        let mut eval = |s: &ParticleState| {
            let mut s = s.clone();
            solver.substep(&mut s, &mats, &sd).unwrap();
            objective(&s, &seed)
        };
        let h = 1e-7;
        for p in 0..s0.len() {
            for a in 0..3 {
                let mut sp = s0.clone();
                sp.x[p][a] += h;
                let mut sm = s0.clone();
                sm.x[p][a] -= h;
                let d = (eval(&sp) - eval(&sm)) / (2.0 * h);
                assert!(
                    (d - adj.x[p][a]).abs() < 1e-4 * (1.0 + d.abs()),
                    "x[{p}][{a}] {d} vs {}",
                    adj.x[p][a]
                );
            }
        }
    }

    #[test]
    fn bit_identical_repeats() {
        let cfg = SimConfig::default();
        let mats = materials(4);
        let drive = Drive::none();
        let run = || {
            let mut solver = Solver::new(cfg.clone()).unwrap();
            let mut s = sample_state();
            for i in 0..10 {
                solver
                    .substep(&mut s, &mats, &drive.substep(i, &cfg))
                    .unwrap();
            }
            s
        };
        let a = run();
        let b = run();
        for p in 0..a.len() {
            for k in 0..3 {
                assert_eq!(a.x[p][k].to_bits(), b.x[p][k].to_bits());
            }
        }
    }
}
