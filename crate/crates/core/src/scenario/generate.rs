use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::bundle::{to_points, to_vec3, Point, SequenceBundle, DEFAULT_FPS};
use super::spec::{ObjectKind, ScenarioSpec, ScriptKind, Teacher, TeacherMaterials};
use crate::actuation::ActuatorSet;
use crate::error::{Error, Result};
use crate::material::{one_hot_logits, MaterialBounds, MaterialField};
use crate::math::Vec3;
use crate::mpm::ParticleState;
use crate::rollout::{rollout, Model, RolloutStart};

/// Logit gap that makes a teacher patch effectively single-expert.
const TEACHER_LOGIT: f64 = 20.0;

/// Rest particle positions, rounded through f32 so that the bundle's
/// `init_particles` reproduce them exactly.
pub fn sample_geometry(spec: &ScenarioSpec) -> Result<Vec<Vec3>> {
    spec.validate()?;
    let h = spec.spacing;
    let count = |len: f64| ((len / h).round() as usize).max(1);
    let floor = spec.sim_config().floor_height();
    let lattice = |n: [usize; 3]| -> Vec<Vec3> {
        let mut out = Vec::with_capacity(n[0] * n[1] * n[2]);
        for i in 0..n[0] {
            for j in 0..n[1] {
                for k in 0..n[2] {
                    out.push(Vec3::new(
                        (i as f64 - 0.5 * (n[0] - 1) as f64) * h,
                        (j as f64 - 0.5 * (n[1] - 1) as f64) * h,
                        (k as f64 - 0.5 * (n[2] - 1) as f64) * h,
                    ));
                }
            }
        }
        out
    };
    let local = match spec.kind {
        ObjectKind::Rope => lattice([
            count(spec.size[0]),
            count(spec.size[1]),
            count(spec.size[2]),
        ]),
        ObjectKind::Cloth => lattice([count(spec.size[0]), count(spec.size[1]), 3]),
        ObjectKind::Box => lattice([
            count(spec.size[0]),
            count(spec.size[1]),
            count(spec.size[2]),
        ]),
        ObjectKind::Sphere => {
            let r = 0.5 * spec.size[0];
            let n = count(spec.size[0]);
            let pts: Vec<Vec3> = lattice([n, n, n])
                .into_iter()
                .filter(|p| p.norm() <= r + 1e-12)
                .collect();
            if pts.is_empty() {
                lattice([1, 1, 1])
            } else {
                pts
            }
        }
    };
    let z_min = local.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let origin = Vec3::new(spec.center[0], spec.center[1], floor + h - z_min);
    let points: Vec<Vec3> = local.iter().map(|p| p + origin).collect();
    let cfg = spec.sim_config();
    if points
        .iter()
        .flat_map(|p| p.iter())
        .any(|c| *c < cfg.clip_min || *c > cfg.clip_max)
    {
        return Err(Error::arg(
            "object does not fit inside the simulation bounds",
        ));
    }
    Ok(to_vec3(&to_points(&points)))
}

/// Frame-0 anchor positions: grip points on the object surface.
pub fn grip_anchors(kind: ObjectKind, rest: &[Vec3]) -> Vec<Vec3> {
    let min = rest
        .iter()
        .fold(Vec3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let max = rest
        .iter()
        .fold(Vec3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let mid = 0.5 * (min + max);
    match kind {
        ObjectKind::Rope => vec![Vec3::new(min.x, mid.y, mid.z)],
        ObjectKind::Cloth => vec![
            Vec3::new(min.x, min.y, mid.z),
            Vec3::new(min.x, max.y, mid.z),
        ],
        ObjectKind::Box | ObjectKind::Sphere => vec![Vec3::new(mid.x, mid.y, max.z)],
    }
}

/// Anchor displacement at frame `t`.
pub fn script_offset(spec: &ScenarioSpec, t: usize) -> Vec3 {
    let d = spec.script.duration as f64;
    let s = (t as f64 / d).min(1.0);
    let a = spec.script.amplitude;
    match spec.script.kind {
        ScriptKind::Lift => Vec3::new(0.0, 0.0, a * s),
        ScriptKind::Drag => Vec3::new(a * s, 0.0, 0.0),
        ScriptKind::Poke => Vec3::new(0.0, 0.0, -a * (std::f64::consts::PI * s).sin()),
        ScriptKind::Shake => Vec3::new(
            0.0,
            a * (2.0 * std::f64::consts::PI * t as f64 / d).sin(),
            0.0,
        ),
    }
}

/// Teacher material field over the rest geometry.
pub fn teacher_field(spec: &ScenarioSpec, rest: &[Vec3]) -> Result<MaterialField> {
    let bounds = MaterialBounds::for_category(spec.category());
    let mut field = MaterialField::init_patches(rest, spec.patches.min(rest.len()), bounds)?;
    let split = spec.center[0];
    let mut out_of_bounds = false;
    field.assign_patches(|anchor| {
        let m = match &spec.teacher {
            TeacherMaterials::Uniform { material } => material,
            TeacherMaterials::SplitX { left, right } => {
                if anchor.x < split {
                    left
                } else {
                    right
                }
            }
        };
        out_of_bounds |= !(m.youngs > bounds.e_min && m.youngs < bounds.e_max)
            || !(m.poisson > bounds.nu_min && m.poisson < bounds.nu_max);
        (m.youngs, m.poisson, one_hot_logits(m.expert, TEACHER_LOGIT))
    });
    if out_of_bounds {
        return Err(Error::arg(format!(
            "teacher materials must lie strictly inside E in ({}, {}) Pa and nu in ({}, {})",
            bounds.e_min, bounds.e_max, bounds.nu_min, bounds.nu_max
        )));
    }
    Ok(field)
}

/// Teacher model as stored in the bundle sidecar.
pub fn teacher_model(teacher: &Teacher) -> Model {
    let mut model = Model::new(teacher.sim.clone(), teacher.materials.clone());
    model.gains = teacher.gains;
    model.external = teacher.mismatch.force();
    model
}

/// Synthesizes a bundle by rolling out the teacher with the injected
/// mismatch and observing it with noise.
pub fn gen_scenario(spec: &ScenarioSpec, seed: u64) -> Result<SequenceBundle> {
    let rest = sample_geometry(spec)?;
    let sim = spec.sim_config();
    let n = rest.len();
    let volume = spec.spacing.powi(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let grips = grip_anchors(spec.kind, &rest);
    let anchor_traj: Vec<Vec<Vec3>> = (0..spec.frames)
        .map(|t| {
            let d = script_offset(spec, t);
            grips.iter().map(|g| g + d).collect()
        })
        .collect();
    let anchor_points: Vec<Vec<Point>> = anchor_traj.iter().map(|f| to_points(f)).collect();
    let radius = spec.binding_radius;
    let actuators = ActuatorSet::new(
        &rest,
        anchor_points.iter().map(|f| to_vec3(f)).collect(),
        radius,
    )?;
    if actuators.binding.coupled_particles() == 0 {
        return Err(Error::arg(
            "no particle lies within the actuator binding radius",
        ));
    }

    let teacher = Teacher {
        spec: spec.clone(),
        sim: sim.clone(),
        materials: teacher_field(spec, &rest)?,
        gains: spec.gains,
        mismatch: spec.mismatch,
        track_particles: rand::seq::index::sample(&mut rng, n, spec.tracks.min(n)).into_vec(),
        seed,
    };
    let model = teacher_model(&teacher);
    let s0 = ParticleState::at_rest(rest.clone(), volume, sim.density)?;
    let (traj, _) = rollout(
        &model,
        RolloutStart::new(s0),
        Some(&actuators),
        spec.frames - 1,
        false,
    )?;

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::arg(e.to_string()))?;
    let jitter = |p: &Vec3, rng: &mut ChaCha8Rng| -> Point {
        std::array::from_fn(|a| (p[a] + noise.sample(rng)).clamp(0.0, 1.0) as f32)
    };
    let target_points = traj
        .states
        .iter()
        .map(|s| s.x.iter().map(|p| jitter(p, &mut rng)).collect())
        .collect();
    let tracks = traj
        .states
        .iter()
        .map(|s| {
            to_points(
                &teacher
                    .track_particles
                    .iter()
                    .map(|&p| s.x[p])
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let appearance_points = (spec.appearance_per_particle > 0).then(|| {
        let half = 0.5 * spec.spacing;
        rest.iter()
            .flat_map(|p| std::iter::repeat_n(*p, spec.appearance_per_particle))
            .map(|p| {
                std::array::from_fn(|a| {
                    (p[a] + rng.random_range(-half..half)).clamp(0.0, 1.0) as f32
                })
            })
            .collect()
    });

    let bundle = SequenceBundle {
        category: spec.category(),
        fps: DEFAULT_FPS,
        particle_volume: volume,
        binding_radius: radius,
        init_particles: to_points(&rest),
        target_points,
        tracks,
        actuator_anchors: anchor_points,
        appearance_points,
        teacher: Some(teacher),
    };
    bundle.validate()?;
    Ok(bundle)
}
