use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::cma::{cma_es_gains, CmaConfig, GainSearch};
use super::losses::{FrameTarget, LossTerms, LossWeights, Supervision};
use super::optim::{clip_norm, clip_values, Adam, AdamConfig};
use crate::actuation::{ActuatorSet, DcaGains};
use crate::error::{Error, Result};
use crate::material::{one_hot_logits, Expert, MaterialBounds, MaterialField, DEFAULT_PATCH_COUNT};
use crate::math::Vec3;
use crate::mpm::{ParticleState, SimConfig, Solver};
use crate::residual::{ResidualConfig, ResidualNet, ResidualParams};
use crate::rollout::{backward, rollout_with, Model, OutputCotangents, RolloutStart, Trajectory};
use crate::scenario::{to_vec3, SequenceBundle};

/// Logit gap that pins a single-expert model to one constitutive law.
pub const SINGLE_EXPERT_LOGIT: f64 = 50.0;

/// Divergent windows tolerated before training gives up.
const MAX_DIVERGENCES: usize = 8;

/// How the learnable model is initialized from a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelInit {
    pub patches: usize,
    /// Uniform starting Young's modulus; the bounded midpoint when absent.
    pub initial_youngs: Option<f64>,
    pub initial_poisson: Option<f64>,
    /// Pins every patch to one expert instead of learning the mixture.
    pub single_expert: Option<Expert>,
    pub residual: bool,
    pub gains: DcaGains,
    pub seed: u64,
}

impl Default for ModelInit {
    fn default() -> Self {
        ModelInit {
            patches: DEFAULT_PATCH_COUNT,
            initial_youngs: None,
            initial_poisson: None,
            single_expert: None,
            residual: true,
            gains: DcaGains::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Frames per training window.
    pub window: usize,
    pub physics: AdamConfig,
    /// Per-entry clip on physics gradients, applied before the norm clip.
    pub physics_clip_value: f64,
    pub physics_clip_norm: f64,
    pub cma: CmaConfig,
    /// Frames from frame 0 scored by the gain-selection objective.
    pub cma_frames: usize,
    /// Stage-2 iterations between checkpoint evaluations.
    pub eval_every: usize,
    /// Frames available for training; later frames are held out.
    pub train_frames: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            stage1_iters: 300,
            stage2_iters: 300,
            window: 8,
            physics: AdamConfig::default(),
            physics_clip_value: 1.0,
            physics_clip_norm: 10.0,
            cma: CmaConfig::default(),
            cma_frames: 8,
            eval_every: 25,
            train_frames: None,
        }
    }
}

/// Everything a `train` run reads from its configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Solver settings; the bundle category's defaults when absent.
    pub sim: Option<SimConfig>,
    pub model: ModelInit,
    pub residual: ResidualConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(sim) = &self.sim {
            sim.validate()?;
        }
        self.residual.validate()?;
        self.weights.validate()?;
        self.schedule.physics.validate()?;
        self.schedule.cma.validate()?;
        let s = &self.schedule;
        if s.window == 0 || s.cma_frames == 0 || s.eval_every == 0 {
            return Err(Error::Config(
                "window, cma_frames and eval_every must be positive".into(),
            ));
        }
        if !(s.physics_clip_value > 0.0 && s.physics_clip_norm > 0.0) {
            return Err(Error::Config(
                "gradient clip limits must be positive".into(),
            ));
        }
        if self.model.patches < 3 {
            return Err(Error::Config(
                "at least three material patches are needed".into(),
            ));
        }
        self.model.gains.validate()
    }

    pub fn sim_for(&self, bundle: &SequenceBundle) -> Result<SimConfig> {
        let sim = self
            .sim
            .clone()
            .unwrap_or_else(|| SimConfig::for_category(bundle.category));
        sim.validate()?;
        if (sim.frame_dt - bundle.frame_dt()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "solver frame interval {} s does not match the bundle's {} fps",
                sim.frame_dt, bundle.fps
            )));
        }
        Ok(sim)
    }
}

/// Learnable model for `bundle` before any training.
pub fn init_model(bundle: &SequenceBundle, cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    let sim = cfg.sim_for(bundle)?;
    let rest = to_vec3(&bundle.init_particles);
    let bounds = MaterialBounds::for_category(bundle.category);
    let mut field = MaterialField::init_patches(&rest, cfg.model.patches.min(rest.len()), bounds)?;
    if let Some(e) = cfg.model.initial_youngs {
        if !(e > bounds.e_min && e < bounds.e_max) {
            return Err(Error::Config(format!(
                "initial E {e} lies outside ({}, {})",
                bounds.e_min, bounds.e_max
            )));
        }
        field.raw_e.fill(bounds.raw_youngs(e));
    }
    if let Some(nu) = cfg.model.initial_poisson {
        if !(nu > bounds.nu_min && nu < bounds.nu_max) {
            return Err(Error::Config(format!(
                "initial nu {nu} lies outside ({}, {})",
                bounds.nu_min, bounds.nu_max
            )));
        }
        field.raw_nu.fill(bounds.raw_poisson(nu));
    }
    if let Some(expert) = cfg.model.single_expert {
        field
            .logits
            .fill(one_hot_logits(expert, SINGLE_EXPERT_LOGIT));
    }
    let mut model = Model::new(sim.clone(), field);
    model.gains = cfg.model.gains;
    if cfg.model.residual {
        let params = ResidualParams::init(cfg.residual.clone(), cfg.model.seed)?;
        model.residual = Some(ResidualNet::new(params, sim.grid_resolution));
    }
    Ok(model)
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub stage: u8,
    pub iteration: usize,
    pub window_start: usize,
    pub loss: f64,
    pub track: f64,
    pub shape: f64,
    pub length: f64,
    pub reg: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Sequence loss of the model before any update.
    pub initial_loss: f64,
    pub stage1_end_loss: f64,
    pub final_loss: f64,
    pub gain_search: Option<GainSearch>,
    /// Where the returned parameters come from.
    pub checkpoint: String,
    pub divergences: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn to_text(&self, model: &Model) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "initial sequence loss   {:.6e}\n",
            self.initial_loss
        ));
        s.push_str(&format!(
            "stage 1 end loss        {:.6e}\n",
            self.stage1_end_loss
        ));
        s.push_str(&format!(
            "final loss              {:.6e}\n",
            self.final_loss
        ));
        s.push_str(&format!("selected checkpoint     {}\n", self.checkpoint));
        if let Some(g) = &self.gain_search {
            s.push_str(&format!(
                "gain search             kp {:.4e} kd {:.4e} (warm {:.4e} {:.4e}), loss {:.6e} vs warm {:.6e}, {} evaluations, {} failed\n",
                g.gains.kp, g.gains.kd, g.warm.kp, g.warm.kd, g.loss, g.warm_loss, g.outcome.evaluations, g.outcome.failed_evaluations
            ));
            if let Some(w) = &g.warning {
                s.push_str(&format!("gain search warning     {w}\n"));
            }
        }
        s.push_str(&format!(
            "final gains             kp {:.4e} kd {:.4e}\n",
            model.gains.kp, model.gains.kd
        ));
        s.push_str(&format!(
            "mean particle E         {:.4e} Pa\n",
            model.materials.mean_particle_youngs()
        ));
        s.push_str(&format!(
            "residual                {}\n",
            if model.residual.is_some() {
                "on"
            } else {
                "off"
            }
        ));
        s.push_str(&format!("divergent windows       {}\n", self.divergences));
        s.push_str(&format!("wall clock              {:.1} s\n", self.seconds));
        s
    }
}

pub fn write_loss_csv(path: &std::path::Path, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for r in log {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fixed data of one fitting problem: observations, actuation and the
/// supervision structure.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub initial: ParticleState,
    pub actuators: ActuatorSet,
    pub supervision: Supervision,
    pub targets: Vec<Vec<Vec3>>,
    pub tracks: Vec<Vec<Vec3>>,
    pub weights: LossWeights,
    pub reg_weight: f64,
    /// Frames usable for fitting, counting frame 0.
    pub frames: usize,
}

impl FitProblem {
    pub fn new(bundle: &SequenceBundle, cfg: &TrainConfig) -> Result<Self> {
        bundle.validate()?;
        let sim = cfg.sim_for(bundle)?;
        let frames = cfg
            .schedule
            .train_frames
            .unwrap_or(bundle.frame_count())
            .min(bundle.frame_count());
        if frames < 2 {
            return Err(Error::Config("training needs at least two frames".into()));
        }
        let initial = bundle.initial_state(sim.density)?;
        let tracks: Vec<Vec<Vec3>> = bundle.tracks.iter().map(|f| to_vec3(f)).collect();
        Ok(FitProblem {
            supervision: Supervision::new(&initial.x, tracks.first().map_or(&[], Vec::as_slice)),
            actuators: bundle.actuators()?,
            initial,
            targets: bundle.target_points.iter().map(|f| to_vec3(f)).collect(),
            tracks,
            weights: cfg.weights,
            reg_weight: cfg.residual.reg_weight,
            frames,
        })
    }

    fn target(&self, t: usize) -> FrameTarget<'_> {
        FrameTarget {
            points: &self.targets[t],
            tracks: &self.tracks[t],
        }
    }

    /// Mean per-frame loss of a trajectory and, optionally, its cotangents.
    pub fn trajectory_loss(
        &self,
        traj: &Trajectory,
        with_grad: bool,
    ) -> (f64, LossTerms, Option<OutputCotangents>) {
        let steps = traj.frame_count() - 1;
        let n = self.initial.len();
        let scale = 1.0 / steps.max(1) as f64;
        let mut terms = LossTerms::default();
        let mut cot = with_grad.then(|| OutputCotangents::zeros(steps, n));
        for k in 0..steps {
            let t = traj.start_frame + k + 1;
            let (ft, gx, gdv) = self.supervision.frame_loss(
                &traj.states[k + 1].x,
                &traj.corrections[k],
                self.target(t),
                &self.weights,
                self.reg_weight,
                scale,
            );
            terms.accumulate(&ft, scale);
            if let Some(c) = &mut cot {
                c.x[k] = gx;
                c.dv[k] = gdv;
            }
        }
        (terms.total(&self.weights, self.reg_weight), terms, cot)
    }

    /// Loss of a forward rollout over frames `1..frames` from frame 0.
    pub fn sequence_loss(&self, model: &Model, frames: usize) -> Result<f64> {
        let mut solver = Solver::new(model.sim.clone())?;
        let steps = frames.min(self.frames) - 1;
        let (traj, _) = rollout_with(
            model,
            &mut solver,
            RolloutStart::new(self.initial.clone()),
            Some(&self.actuators),
            steps,
            false,
        )?;
        Ok(self.trajectory_loss(&traj, false).0)
    }
}

/// Adam-driven fitting of materials and residual over sliding windows.
///
/// Windows run in order; each starts from the state the model itself
/// reached at the end of the previous window, and window 0 starts from
/// the observed frame-0 configuration.
pub struct Trainer<'a> {
    pub problem: &'a FitProblem,
    pub schedule: TrainSchedule,
    pub model: Model,
    physics: Adam,
    residual: Option<Adam>,
    residual_clip: f64,
    train_logits: bool,
    windows: Vec<(usize, usize)>,
    starts: Vec<Option<RolloutStart>>,
    next: usize,
    solver: Solver,
    pub log: Vec<LossRecord>,
    pub divergences: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        problem: &'a FitProblem,
        model: Model,
        schedule: TrainSchedule,
        train_logits: bool,
    ) -> Result<Self> {
        let last = problem.frames - 1;
        let windows: Vec<(usize, usize)> = (0..last)
            .step_by(schedule.window)
            .map(|s| (s, schedule.window.min(last - s)))
            .collect();
        let mut starts = vec![None; windows.len()];
        starts[0] = Some(RolloutStart::new(problem.initial.clone()));
        let residual = model.residual.as_ref().map(|net| {
            let cfg = AdamConfig {
                lr: net.params.config.learning_rate,
                ..schedule.physics
            };
            Adam::new(cfg, net.params.len())
        });
        let residual_clip = model
            .residual
            .as_ref()
            .map_or(0.0, |net| net.params.config.grad_clip);
        Ok(Trainer {
            problem,
            physics: Adam::new(schedule.physics, model.materials.to_flat().len()),
            residual,
            residual_clip,
            train_logits,
            windows,
            starts,
            next: 0,
            solver: Solver::new(model.sim.clone())?,
            model,
            schedule,
            log: Vec::new(),
            divergences: 0,
        })
    }

    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    fn restart(&mut self) {
        self.next = 0;
        self.starts.iter_mut().skip(1).for_each(|s| *s = None);
    }

    /// One forward/backward pass over the next window and one Adam step.
    pub fn iterate(&mut self, stage: u8, iteration: usize) -> Result<LossRecord> {
        let clock = Instant::now();
        loop {
            let w = self.next;
            let (first, steps) = self.windows[w];
            let start = self.starts[w]
                .clone()
                .expect("window start cached by its predecessor");
            let snapshot = (self.model.materials.clone(), self.model.residual.clone());
            let pass = rollout_with(
                &self.model,
                &mut self.solver,
                start,
                Some(&self.problem.actuators),
                steps,
                true,
            )
            .and_then(|(traj, tape)| {
                let (loss, terms, cot) = self.problem.trajectory_loss(&traj, true);
                let grads = backward(
                    &self.model,
                    &tape.expect("recorded"),
                    Some(&self.problem.actuators),
                    &cot.expect("requested"),
                )?;
                Ok((traj, loss, terms, grads))
            });
            let (traj, loss, terms, grads) = match pass {
                Ok(v) if v.1.is_finite() => v,
                Ok(_) | Err(Error::Divergence { .. }) => {
                    self.divergences += 1;
                    tracing::warn!(
                        stage,
                        iteration,
                        window = first,
                        "divergent window; halving learning rates and restarting from frame 0"
                    );
                    if self.divergences > MAX_DIVERGENCES {
                        return Err(Error::Divergence {
                            frame: first,
                            reason: format!("training diverged {} times", self.divergences),
                        });
                    }
                    self.model.materials = snapshot.0;
                    self.model.residual = snapshot.1;
                    self.physics.config.lr *= 0.5;
                    if let Some(r) = &mut self.residual {
                        r.config.lr *= 0.5;
                    }
                    self.restart();
                    continue;
                }
                Err(e) => return Err(e),
            };

            let mut g = grads.material.to_flat();
            if !self.train_logits {
                let m = self.model.materials.patch_count();
                g[2 * m..].fill(0.0);
            }
            clip_values(&mut g, self.schedule.physics_clip_value);
            clip_norm(&mut g, self.schedule.physics_clip_norm);
            let mut flat = self.model.materials.to_flat();
            self.physics.step(&mut flat, &g)?;
            self.model.materials.set_flat(&flat)?;
            if let (Some(net), Some(adam), Some(mut rg)) =
                (&mut self.model.residual, &mut self.residual, grads.residual)
            {
                clip_norm(&mut rg, self.residual_clip);
                adam.step(&mut net.params.data, &rg)?;
            }

            if w + 1 < self.windows.len() {
                self.starts[w + 1] = Some(traj.continuation());
            }
            self.next = (w + 1) % self.windows.len();
            let record = LossRecord {
                stage,
                iteration,
                window_start: first,
                loss,
                track: terms.track,
                shape: terms.shape,
                length: terms.length,
                reg: terms.reg,
                seconds: clock.elapsed().as_secs_f64(),
            };
            self.log.push(record);
            return Ok(record);
        }
    }
}

/// Fitted model, loss log and summary of a Stage 1 → gain search →
/// Stage 2 run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRecord>,
    pub report: TrainReport,
}

/// Stage 1 (Adam on materials and residual under the initial gains),
/// CMA-ES gain selection, then Stage 2 (Adam under the selected gains).
/// Returns the checkpoint with the lowest sequence loss among the
/// Stage-1 end and the Stage-2 evaluations.
pub fn train_stage12(bundle: &SequenceBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = init_model(bundle, cfg)?;
    let problem = FitProblem::new(bundle, cfg)?;
    train_model(&problem, model, cfg, cfg.model.single_expert.is_none())
}

pub fn train_model(
    problem: &FitProblem,
    model: Model,
    cfg: &TrainConfig,
    train_logits: bool,
) -> Result<TrainOutcome> {
    let clock = Instant::now();
    let s = cfg.schedule.clone();
    let initial_loss = problem.sequence_loss(&model, problem.frames)?;
    let mut trainer = Trainer::new(problem, model, s.clone(), train_logits)?;
    for it in 0..s.stage1_iters {
        let r = trainer.iterate(1, it)?;
        if it % 25 == 0 {
            tracing::info!(stage = 1, iteration = it, loss = r.loss, "training");
        }
    }
    let stage1_end_loss = problem.sequence_loss(&trainer.model, problem.frames)?;
    let mut best = (
        stage1_end_loss,
        trainer.model.clone(),
        "stage 1 end".to_string(),
    );

    let base = trainer.model.clone();
    let objective = |gains: DcaGains| {
        let mut m = base.clone();
        m.gains = gains;
        problem.sequence_loss(&m, s.cma_frames + 1).ok()
    };
    let search = cma_es_gains(objective, base.gains, &s.cma)?;
    trainer.model.gains = search.gains;
    tracing::info!(
        kp = search.gains.kp,
        kd = search.gains.kd,
        loss = search.loss,
        "gain search"
    );

    let evaluate = |trainer: &Trainer<'_>, best: &mut (f64, Model, String), label: String| {
        if let Ok(loss) = problem.sequence_loss(&trainer.model, problem.frames) {
            if loss < best.0 {
                *best = (loss, trainer.model.clone(), label);
            }
        }
    };
    evaluate(&trainer, &mut best, "after gain search".into());
    for it in 0..s.stage2_iters {
        let r = trainer.iterate(2, it)?;
        if it % 25 == 0 {
            tracing::info!(stage = 2, iteration = it, loss = r.loss, "training");
        }
        if (it + 1) % s.eval_every == 0 || it + 1 == s.stage2_iters {
            evaluate(&trainer, &mut best, format!("stage 2 iteration {}", it + 1));
        }
    }
    let (final_loss, model, checkpoint) = best;
    Ok(TrainOutcome {
        model,
        report: TrainReport {
            initial_loss,
            stage1_end_loss,
            final_loss,
            gain_search: Some(search),
            checkpoint,
            divergences: trainer.divergences,
            seconds: clock.elapsed().as_secs_f64(),
        },
        log: trainer.log,
    })
}
