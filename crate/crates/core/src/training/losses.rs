use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Distances below this contribute no gradient (the norm is not
/// differentiable at zero).
const DIST_EPS: f64 = 1e-12;

pub const LENGTH_NEIGHBORS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub track: f64,
    pub shape: f64,
    pub length: f64,
    /// Kept for configuration compatibility; no photometric term is computed.
    pub rgb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            track: 1.0,
            shape: 1.0,
            length: 0.1,
            rgb: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.track, self.shape, self.length, self.rgb];
        if w.iter().all(|x| x.is_finite() && *x >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ))
        }
    }
}

fn nearest(p: &Vec3, cloud: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in cloud.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Symmetric mean nearest-neighbor distance.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut ab = 0.0;
    for p in a {
        ab += nearest(p, b).1;
    }
    let mut ba = 0.0;
    for q in b {
        ba += nearest(q, a).1;
    }
    0.5 * (ab / a.len() as f64 + ba / b.len() as f64)
}

/// Chamfer distance and its gradient w.r.t. `pred`; `target` is constant.
pub fn chamfer_grad(pred: &[Vec3], target: &[Vec3]) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); pred.len()];
    if pred.is_empty() || target.is_empty() {
        return (0.0, grad);
    }
    let (n, m) = (pred.len() as f64, target.len() as f64);
    let mut ab = 0.0;
    for (i, p) in pred.iter().enumerate() {
        let (j, d) = nearest(p, target);
        ab += d;
        if d > DIST_EPS {
            grad[i] += (p - target[j]) * (0.5 / (n * d));
        }
    }
    let mut ba = 0.0;
    for q in target {
        let (i, d) = nearest(q, pred);
        ba += d;
        if d > DIST_EPS {
            grad[i] += (pred[i] - q) * (0.5 / (m * d));
        }
    }
    (0.5 * (ab / n + ba / m), grad)
}

/// Particle driving each track: the nearest particle to the track's
/// frame-0 position, fixed thereafter.
pub fn bind_tracks(particles: &[Vec3], tracks0: &[Vec3]) -> Vec<usize> {
    tracks0.iter().map(|t| nearest(t, particles).0).collect()
}

/// Mean distance between predicted and observed track points of one frame.
pub fn track_loss(pred: &[Vec3], gt: &[Vec3]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(gt)
        .map(|(p, g)| (p - g).norm())
        .sum::<f64>()
        / pred.len() as f64
}

/// Track loss of one frame and its gradient w.r.t. the particle positions.
pub fn track_loss_grad(x: &[Vec3], binding: &[usize], gt: &[Vec3]) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); x.len()];
    if binding.is_empty() {
        return (0.0, grad);
    }
    let k = binding.len() as f64;
    let mut value = 0.0;
    for (&p, g) in binding.iter().zip(gt) {
        let r = x[p] - g;
        let d = r.norm();
        value += d / k;
        if d > DIST_EPS {
            grad[p] += r / (k * d);
        }
    }
    (value, grad)
}

/// Rest-length edge between two particles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestEdge {
    pub i: usize,
    pub j: usize,
    pub length: f64,
}

/// Undirected `k`-nearest-neighbor edges of the rest geometry, without
/// duplicates and without zero-length pairs.
pub fn knn_edges(rest: &[Vec3], k: usize) -> Vec<RestEdge> {
    let mut pairs = std::collections::BTreeSet::new();
    let mut near: Vec<(f64, usize)> = Vec::with_capacity(rest.len());
    for (i, p) in rest.iter().enumerate() {
        near.clear();
        near.extend(
            rest.iter()
                .enumerate()
                .filter(|&(j, q)| j != i && (p - q).norm() > DIST_EPS)
                .map(|(j, q)| ((p - q).norm_squared(), j)),
        );
        let take = k.min(near.len());
        if take == 0 {
            continue;
        }
        near.select_nth_unstable_by(take - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &near[..take] {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    pairs
        .into_iter()
        .map(|(i, j)| RestEdge {
            i,
            j,
            length: (rest[i] - rest[j]).norm(),
        })
        .collect()
}

/// Mean squared relative stretch over the edges.
pub fn length_loss(x: &[Vec3], edges: &[RestEdge]) -> f64 {
    length_loss_grad(x, edges).0
}

pub fn length_loss_grad(x: &[Vec3], edges: &[RestEdge]) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); x.len()];
    if edges.is_empty() {
        return (0.0, grad);
    }
    let e = edges.len() as f64;
    let mut value = 0.0;
    for edge in edges {
        let r = x[edge.i] - x[edge.j];
        let d = r.norm();
        let s = (d - edge.length) / edge.length;
        value += s * s / e;
        if d > DIST_EPS {
            let g = r * (2.0 * s / (edge.length * d * e));
            grad[edge.i] += g;
            grad[edge.j] -= g;
        }
    }
    (value, grad)
}

/// Observation of one frame used by the dynamics loss.
#[derive(Debug, Clone, Copy)]
pub struct FrameTarget<'a> {
    pub points: &'a [Vec3],
    pub tracks: &'a [Vec3],
}

/// Loss terms of one frame, unweighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub track: f64,
    pub shape: f64,
    pub length: f64,
    pub reg: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights, reg_weight: f64) -> f64 {
        w.track * self.track + w.shape * self.shape + w.length * self.length + reg_weight * self.reg
    }

    pub fn accumulate(&mut self, other: &LossTerms, scale: f64) {
        self.track += scale * other.track;
        self.shape += scale * other.shape;
        self.length += scale * other.length;
        self.reg += scale * other.reg;
    }
}

/// Fixed supervision structure of a sequence: track binding and rest edges.
#[derive(Debug, Clone)]
pub struct Supervision {
    pub track_particles: Vec<usize>,
    pub edges: Vec<RestEdge>,
}

impl Supervision {
    pub fn new(rest: &[Vec3], tracks0: &[Vec3]) -> Self {
        Supervision {
            track_particles: bind_tracks(rest, tracks0),
            edges: knn_edges(rest, LENGTH_NEIGHBORS),
        }
    }

    /// Weighted loss of one frame and its gradients w.r.t. positions and
    /// the residual correction. `scale` multiplies value and gradients.
    pub fn frame_loss(
        &self,
        x: &[Vec3],
        dv: &[Vec3],
        target: FrameTarget<'_>,
        w: &LossWeights,
        reg_weight: f64,
        scale: f64,
    ) -> (LossTerms, Vec<Vec3>, Vec<Vec3>) {
        let mut gx = vec![Vec3::zeros(); x.len()];
        let mut terms = LossTerms::default();
        if w.track > 0.0 {
            let (v, g) = track_loss_grad(x, &self.track_particles, target.tracks);
            terms.track = v;
            gx.iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b * (w.track * scale));
        }
        if w.shape > 0.0 {
            let (v, g) = chamfer_grad(x, target.points);
            terms.shape = v;
            gx.iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b * (w.shape * scale));
        }
        if w.length > 0.0 {
            let (v, g) = length_loss_grad(x, &self.edges);
            terms.length = v;
            gx.iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b * (w.length * scale));
        }
        let n = dv.len().max(1) as f64;
        terms.reg = dv.iter().map(|d| d.norm_squared()).sum::<f64>() / n;
        let gdv = dv
            .iter()
            .map(|d| d * (2.0 * reg_weight * scale / n))
            .collect();
        (terms, gx, gdv)
    }
}
