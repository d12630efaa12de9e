use std::path::Path;

use serde::Serialize;

use super::losses::{bind_tracks, chamfer, track_loss};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::rollout::{rollout, Model, RolloutStart, Trajectory};
use crate::scenario::{to_vec3, SequenceBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub chamfer: f64,
    pub track_error: f64,
}

/// Per-frame desk metrics of a full rollout from frame 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Frames `1..T`.
    pub frames: Vec<FrameMetrics>,
    /// Mean wall-clock seconds per simulated frame.
    pub seconds_per_frame: f64,
}

impl EvalReport {
    fn mean(&self, from: usize, to: usize, f: impl Fn(&FrameMetrics) -> f64) -> f64 {
        let sel: Vec<f64> = self
            .frames
            .iter()
            .filter(|m| m.frame >= from && m.frame < to)
            .map(f)
            .collect();
        if sel.is_empty() {
            f64::NAN
        } else {
            sel.iter().sum::<f64>() / sel.len() as f64
        }
    }

    /// Mean Chamfer over frames in `from..to`.
    pub fn mean_chamfer(&self, from: usize, to: usize) -> f64 {
        self.mean(from, to, |m| m.chamfer)
    }

    pub fn mean_track_error(&self, from: usize, to: usize) -> f64 {
        self.mean(from, to, |m| m.track_error)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for m in &self.frames {
            w.serialize(m).map_err(|e| Error::Config(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Rolls `model` out over the whole bundle and scores every frame.
pub fn evaluate(model: &Model, bundle: &SequenceBundle) -> Result<(EvalReport, Trajectory)> {
    bundle.validate()?;
    let s0 = bundle.initial_state(model.sim.density)?;
    let acts = bundle.actuators()?;
    let (traj, _) = rollout(
        model,
        RolloutStart::new(s0.clone()),
        Some(&acts),
        bundle.frame_count() - 1,
        false,
    )?;
    let tracks: Vec<Vec<Vec3>> = bundle.tracks.iter().map(|f| to_vec3(f)).collect();
    let binding = bind_tracks(&s0.x, tracks.first().map_or(&[], Vec::as_slice));
    let frames = (1..traj.frame_count())
        .map(|t| {
            let x = &traj.states[t].x;
            let pred: Vec<Vec3> = binding.iter().map(|&p| x[p]).collect();
            FrameMetrics {
                frame: t,
                chamfer: chamfer(x, &to_vec3(&bundle.target_points[t])),
                track_error: track_loss(&pred, &tracks[t]),
            }
        })
        .collect();
    let secs: f64 = traj.frame_seconds.iter().sum();
    let report = EvalReport {
        frames,
        seconds_per_frame: secs / traj.frame_seconds.len().max(1) as f64,
    };
    Ok((report, traj))
}

/// Chamfer between the noise-free teacher positions and the observed
/// targets, averaged over `from..to`: the floor any fit can reach.
pub fn noise_floor(
    bundle: &SequenceBundle,
    teacher_traj: &Trajectory,
    from: usize,
    to: usize,
) -> f64 {
    let vals: Vec<f64> = (from.max(1)..to.min(teacher_traj.frame_count()))
        .map(|t| {
            chamfer(
                &teacher_traj.states[t].x,
                &to_vec3(&bundle.target_points[t]),
            )
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}
