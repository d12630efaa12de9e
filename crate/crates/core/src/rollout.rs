//! The hybrid one-frame transition (MPM tentative state plus residual
//! correction), multi-frame rollouts, and their reverse pass.

use std::time::Instant;

use crate::actuation::{
    ActuatorBinding, ActuatorSet, CouplingMode, DcaGains, Drive, ExternalForce, FrameAction,
};
use crate::error::{Error, Result};
use crate::material::{MaterialField, MaterialGrads, ParticleMaterial, ParticleMaterialGrad};
use crate::math::Vec3;
use crate::mpm::{FrameRecord, ParticleState, SimConfig, Solver, StateAdjoint};
use crate::residual::{
    apply_correction, KinematicHistory, Kinematics, ResidualInputs, ResidualNet,
};

/// Everything needed to advance a scene: solver settings, material field,
/// optional residual, actuator gains and the ablation switches.
#[derive(Debug, Clone)]
pub struct Model {
    pub sim: SimConfig,
    pub materials: MaterialField,
    pub residual: Option<ResidualNet>,
    pub gains: DcaGains,
    /// Multiplies every bounded Young's modulus.
    pub youngs_scale: f64,
    pub coupling: CouplingMode,
    /// Unmodeled body force; only teacher rollouts set this.
    pub external: ExternalForce,
}

impl Model {
    pub fn new(sim: SimConfig, materials: MaterialField) -> Self {
        Model {
            sim,
            materials,
            residual: None,
            gains: DcaGains::default(),
            youngs_scale: 1.0,
            coupling: CouplingMode::Compliant,
            external: ExternalForce::None,
        }
    }

    pub fn particle_materials(&self) -> Vec<ParticleMaterial> {
        self.materials.particle_materials(self.youngs_scale)
    }

    fn drive<'a>(
        &self,
        actuators: Option<&'a ActuatorSet>,
        action: Option<&'a FrameAction>,
    ) -> Drive<'a> {
        Drive {
            actuators: actuators
                .zip(action)
                .map(|(a, f)| (&a.binding, self.gains, f)),
            mode: self.coupling,
            external: self.external,
        }
    }
}

/// Fails with the frame index if any value is non-finite or any particle
/// outruns the configured CFL bound.
pub fn check_divergence(state: &ParticleState, frame: usize, cfg: &SimConfig) -> Result<()> {
    if let Some(p) = state.first_non_finite() {
        return Err(Error::Divergence {
            frame,
            reason: format!("particle {p} holds a non-finite value"),
        });
    }
    let limit = cfg.divergence_speed();
    if let Some((p, v)) = state.v.iter().enumerate().find(|(_, v)| v.norm() > limit) {
        return Err(Error::Divergence {
            frame,
            reason: format!(
                "particle {p} moves at {:.1} m/s, above the {limit:.1} m/s stability limit",
                v.norm()
            ),
        });
    }
    Ok(())
}

/// Rollout entry point: a state at some frame index and the kinematics of
/// every frame up to and including it.
#[derive(Debug, Clone)]
pub struct RolloutStart {
    pub state: ParticleState,
    pub frame: usize,
    pub past: Vec<Kinematics>,
}

impl RolloutStart {
    pub fn new(state: ParticleState) -> Self {
        RolloutStart {
            past: vec![Kinematics::of(&state)],
            state,
            frame: 0,
        }
    }
}

/// Per-frame states of a rollout.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Starts with the initial state.
    pub states: Vec<ParticleState>,
    /// Residual velocity correction applied on each step.
    pub corrections: Vec<Vec<Vec3>>,
    /// Wall-clock seconds per step.
    pub frame_seconds: Vec<f64>,
    /// Global frame index of `states[0]`.
    pub start_frame: usize,
    /// Kinematics of every frame from global frame 0 through the end.
    pub past: Vec<Kinematics>,
}

impl Trajectory {
    pub fn frame_count(&self) -> usize {
        self.states.len()
    }

    pub fn last(&self) -> &ParticleState {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }

    pub fn positions(&self, t: usize) -> &[Vec3] {
        &self.states[t].x
    }

    /// Entry point continuing from the final state.
    pub fn continuation(&self) -> RolloutStart {
        RolloutStart {
            state: self.last().clone(),
            frame: self.start_frame + self.states.len() - 1,
            past: self.past.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct TapeFrame {
    record: FrameRecord,
    action: Option<FrameAction>,
    tentative: ParticleState,
    previous: Vec<Vec3>,
    history: Option<KinematicHistory>,
    dv: Vec<Vec3>,
}

/// Recorded tail substeps of every frame and residual inputs, replayed by
/// [`backward`].
#[derive(Debug, Clone)]
pub struct GradientTape {
    materials: Vec<ParticleMaterial>,
    frames: Vec<TapeFrame>,
}

impl GradientTape {
    pub fn frames(&self) -> usize {
        self.frames.len()
    }

    /// Recorded substeps per frame.
    pub fn window(&self) -> usize {
        self.frames.first().map_or(0, |f| f.record.states.len())
    }
}

/// Runs `steps` frames from `start`.
pub fn rollout(
    model: &Model,
    start: RolloutStart,
    actuators: Option<&ActuatorSet>,
    steps: usize,
    record: bool,
) -> Result<(Trajectory, Option<GradientTape>)> {
    let mut solver = Solver::new(model.sim.clone())?;
    rollout_with(model, &mut solver, start, actuators, steps, record)
}

/// [`rollout`] reusing a caller-owned solver.
pub fn rollout_with(
    model: &Model,
    solver: &mut Solver,
    start: RolloutStart,
    actuators: Option<&ActuatorSet>,
    steps: usize,
    record: bool,
) -> Result<(Trajectory, Option<GradientTape>)> {
    start.state.check_shapes()?;
    if start.past.len() != start.frame + 1 {
        return Err(Error::arg(format!(
            "rollout from frame {} needs {} past frames, got {}",
            start.frame,
            start.frame + 1,
            start.past.len()
        )));
    }
    if model.materials.particle_count() != start.state.len() {
        return Err(Error::arg(
            "material field and state disagree on the particle count",
        ));
    }
    model.gains.validate()?;
    let materials = model.particle_materials();
    let mut traj = Trajectory {
        states: vec![start.state.clone()],
        corrections: Vec::with_capacity(steps),
        frame_seconds: Vec::with_capacity(steps),
        start_frame: start.frame,
        past: start.past,
    };
    let mut tape = record.then(|| GradientTape {
        materials: materials.clone(),
        frames: Vec::with_capacity(steps),
    });
    let mut state = start.state;
    for k in 0..steps {
        let t = traj.start_frame + k;
        let clock = Instant::now();
        let action = actuators.map(|a| a.frame_action(t));
        let drive = model.drive(actuators, action.as_ref());
        let out = transition(
            model, solver, &materials, state, &drive, &traj.past, t, record,
        )?;
        let (next, dv) = (out.next, out.dv);
        let (frame_record, tentative, previous, history) =
            (out.record, out.tentative, out.previous, out.history);
        if let Some(tape) = &mut tape {
            tape.frames.push(TapeFrame {
                record: frame_record,
                action,
                tentative,
                previous,
                history,
                dv: dv.clone(),
            });
        }
        traj.past.push(Kinematics::of(&next));
        traj.states.push(next.clone());
        traj.corrections.push(dv);
        traj.frame_seconds.push(clock.elapsed().as_secs_f64());
        state = next;
    }
    Ok((traj, tape))
}

struct Transition {
    next: ParticleState,
    dv: Vec<Vec3>,
    record: FrameRecord,
    tentative: ParticleState,
    previous: Vec<Vec3>,
    history: Option<KinematicHistory>,
}

/// Advances `state`, the newest entry of `past`, by one frame.
#[allow(clippy::too_many_arguments)]
fn transition(
    model: &Model,
    solver: &mut Solver,
    materials: &[ParticleMaterial],
    state: ParticleState,
    drive: &Drive,
    past: &[Kinematics],
    t: usize,
    record: bool,
) -> Result<Transition> {
    let previous = state.x.clone();
    let mut tentative = state;
    let advanced = if record {
        solver.advance_frame_recorded(&mut tentative, materials, drive)
    } else {
        solver
            .advance_frame(&mut tentative, materials, drive)
            .map(|_| FrameRecord::default())
    };
    let record = advanced.map_err(|e| match e {
        Error::Numerical { particle, what } => Error::Divergence {
            frame: t + 1,
            reason: format!("particle {particle}: {what}"),
        },
        other => other,
    })?;
    check_divergence(&tentative, t + 1, &model.sim)?;
    let (next, dv, history) = match &model.residual {
        Some(net) => {
            let history =
                KinematicHistory::gather(past, past.len() - 1, net.params.config.history)?;
            let inputs = ResidualInputs {
                tentative: &tentative,
                previous: &previous,
                history: &history,
            };
            let dv = net.velocity_correction(&inputs)?;
            (
                apply_correction(&tentative, &dv, &model.sim),
                dv,
                Some(history),
            )
        }
        None => (
            tentative.clone(),
            vec![Vec3::zeros(); tentative.len()],
            None,
        ),
    };
    check_divergence(&next, t + 1, &model.sim)?;
    Ok(Transition {
        next,
        dv,
        record,
        tentative,
        previous,
        history,
    })
}

/// One frame driven by a live action instead of a recorded trajectory.
/// `past` ends with the kinematics of `state`; only the last
/// `history + 1` entries are read. `frame` labels divergence errors.
#[allow(clippy::too_many_arguments)]
pub fn live_step(
    model: &Model,
    solver: &mut Solver,
    materials: &[ParticleMaterial],
    state: ParticleState,
    binding: Option<&ActuatorBinding>,
    action: Option<&FrameAction>,
    past: &[Kinematics],
    frame: usize,
) -> Result<(ParticleState, Vec<Vec3>)> {
    if past.is_empty() {
        return Err(Error::arg(
            "live step needs the kinematics of the current state",
        ));
    }
    let drive = Drive {
        actuators: binding.zip(action).map(|(b, a)| (b, model.gains, a)),
        mode: model.coupling,
        external: model.external,
    };
    let out = transition(model, solver, materials, state, &drive, past, frame, false)?;
    Ok((out.next, out.dv))
}

/// One hybrid transition from frame `start.frame`.
pub fn step(
    model: &Model,
    start: RolloutStart,
    actuators: Option<&ActuatorSet>,
) -> Result<ParticleState> {
    let (traj, _) = rollout(model, start, actuators, 1, false)?;
    Ok(traj.last().clone())
}

/// Cotangents of a scalar loss w.r.t. the rollout outputs.
#[derive(Debug, Clone)]
pub struct OutputCotangents {
    /// Per step, w.r.t. the positions of the state that step produced.
    pub x: Vec<Vec<Vec3>>,
    /// Per step, w.r.t. the residual correction.
    pub dv: Vec<Vec<Vec3>>,
}

impl OutputCotangents {
    pub fn zeros(steps: usize, particles: usize) -> Self {
        OutputCotangents {
            x: vec![vec![Vec3::zeros(); particles]; steps],
            dv: vec![vec![Vec3::zeros(); particles]; steps],
        }
    }
}

/// Gradients of a scalar loss w.r.t. the learnable parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub material: MaterialGrads,
    pub residual: Option<Vec<f64>>,
    /// Cotangent of the rollout's starting state. Zero unless every
    /// substep of every frame was recorded.
    pub initial: StateAdjoint,
}

/// Replays the tape in reverse. Within each frame only the recorded
/// substeps propagate; the frame-entry state is a constant unless the
/// window spans the whole frame.
pub fn backward(
    model: &Model,
    tape: &GradientTape,
    actuators: Option<&ActuatorSet>,
    cot: &OutputCotangents,
) -> Result<Gradients> {
    let steps = tape.frames.len();
    if cot.x.len() != steps || cot.dv.len() != steps {
        return Err(Error::arg(format!(
            "cotangents for {} steps, tape holds {steps}",
            cot.x.len()
        )));
    }
    let n = tape.materials.len();
    let mut solver = Solver::new(model.sim.clone())?;
    let mut adj = StateAdjoint::zeros(n);
    let mut mat_bar = vec![ParticleMaterialGrad::default(); n];
    let mut res_bar = model
        .residual
        .as_ref()
        .map(|net| vec![0.0; net.params.len()]);
    let cfg = &model.sim;
    let dt = cfg.frame_dt;
    for (k, tf) in tape.frames.iter().enumerate().rev() {
        for p in 0..n {
            adj.x[p] += cot.x[k][p];
        }
        if let (Some(net), Some(history)) = (&model.residual, &tf.history) {
            let mut dv_bar = cot.dv[k].clone();
            for p in 0..n {
                let corrected = tf.tentative.x[p] + tf.dv[p] * dt;
                for a in 0..3 {
                    if corrected[a] < cfg.clip_min || corrected[a] > cfg.clip_max {
                        adj.x[p][a] = 0.0;
                    }
                }
                dv_bar[p] += adj.v[p] + adj.x[p] * dt;
            }
            let inputs = ResidualInputs {
                tentative: &tf.tentative,
                previous: &tf.previous,
                history,
            };
            let g = net.backward(
                &inputs,
                &dv_bar,
                res_bar.as_mut().expect("residual gradient"),
            )?;
            for p in 0..n {
                adj.x[p] += g.x[p];
                adj.v[p] += g.v[p];
            }
        }
        let drive = model.drive(actuators, tf.action.as_ref());
        solver.frame_backward(&tf.record, &tape.materials, &drive, &mut adj, &mut mat_bar)?;
        if !tf.record.covers_entry() {
            adj.clear();
        }
    }
    Ok(Gradients {
        material: model.materials.pullback(&mat_bar, model.youngs_scale),
        residual: res_bar,
        initial: adj,
    })
}
