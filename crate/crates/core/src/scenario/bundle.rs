//! On-disk observation package: one `manifest.json` plus one little-endian
//! binary file per array group, all row-major.
//!
//! | group               | file                      | dtype | shape            |
//! |---------------------|---------------------------|-------|------------------|
//! | `init_particles`    | `init_particles.f32`      | f32   | N × 3            |
//! | `target_points`     | `target_points.f32`       | f32   | ΣMₜ × 3          |
//! | `target_offsets`    | `target_offsets.u32`      | u32   | T + 1            |
//! | `tracks`            | `tracks.f32`              | f32   | T × K × 3        |
//! | `actuator_anchors`  | `actuator_anchors.f32`    | f32   | T × A × 3        |
//! | `appearance_points` | `appearance_points.f32`   | f32   | P × 3 (optional) |
//!
//! Frame `t` of `target_points` spans rows `offsets[t]..offsets[t + 1]`.
//! An optional `teacher.json` sidecar holds the generating ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::Teacher;
use crate::actuation::ActuatorSet;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mpm::{Category, ParticleState};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TEACHER_FILE: &str = "teacher.json";
pub const DEFAULT_FPS: f64 = 30.0;

pub type Point = [f32; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub category: Category,
    pub frame_count: usize,
    pub fps: f64,
    pub units: String,
    pub particle_count: usize,
    /// Rest volume of each material particle, m³.
    pub particle_volume: f64,
    pub track_count: usize,
    pub anchor_count: usize,
    /// Actuator coupling radius, meters.
    pub binding_radius: f64,
    pub arrays: BTreeMap<String, ArraySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBundle {
    pub category: Category,
    pub fps: f64,
    pub particle_volume: f64,
    pub binding_radius: f64,
    pub init_particles: Vec<Point>,
    /// Observed point cloud per frame.
    pub target_points: Vec<Vec<Point>>,
    /// Per frame, per track.
    pub tracks: Vec<Vec<Point>>,
    /// Per frame, per anchor.
    pub actuator_anchors: Vec<Vec<Point>>,
    pub appearance_points: Option<Vec<Point>>,
    pub teacher: Option<Teacher>,
}

pub fn to_vec3(points: &[Point]) -> Vec<Vec3> {
    points
        .iter()
        .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64))
        .collect()
}

pub fn to_points(points: &[Vec3]) -> Vec<Point> {
    points
        .iter()
        .map(|p| [p.x as f32, p.y as f32, p.z as f32])
        .collect()
}

impl SequenceBundle {
    pub fn frame_count(&self) -> usize {
        self.target_points.len()
    }

    pub fn particle_count(&self) -> usize {
        self.init_particles.len()
    }

    pub fn track_count(&self) -> usize {
        self.tracks.first().map_or(0, Vec::len)
    }

    pub fn anchor_count(&self) -> usize {
        self.actuator_anchors.first().map_or(0, Vec::len)
    }

    pub fn frame_dt(&self) -> f64 {
        1.0 / self.fps
    }

    /// Undeformed frame-0 state.
    pub fn initial_state(&self, density: f64) -> Result<ParticleState> {
        ParticleState::at_rest(to_vec3(&self.init_particles), self.particle_volume, density)
    }

    /// Recorded anchor trajectory bound against the frame-0 particles.
    pub fn actuators(&self) -> Result<ActuatorSet> {
        let trajectory = self.actuator_anchors.iter().map(|f| to_vec3(f)).collect();
        ActuatorSet::new(
            &to_vec3(&self.init_particles),
            trajectory,
            self.binding_radius,
        )
    }

    /// Manifest describing this bundle's arrays.
    pub fn manifest(&self) -> Manifest {
        let t = self.frame_count();
        let mut arrays = BTreeMap::new();
        let mut add = |name: &str, dtype: Dtype, shape: Vec<usize>| {
            let ext = match dtype {
                Dtype::F32 => "f32",
                Dtype::U32 => "u32",
            };
            arrays.insert(
                name.to_string(),
                ArraySpec {
                    file: format!("{name}.{ext}"),
                    dtype,
                    shape,
                },
            );
        };
        add("init_particles", Dtype::F32, vec![self.particle_count(), 3]);
        let total = self.target_points.iter().map(Vec::len).sum();
        add("target_points", Dtype::F32, vec![total, 3]);
        add("target_offsets", Dtype::U32, vec![t + 1]);
        add("tracks", Dtype::F32, vec![t, self.track_count(), 3]);
        add(
            "actuator_anchors",
            Dtype::F32,
            vec![t, self.anchor_count(), 3],
        );
        if let Some(app) = &self.appearance_points {
            add("appearance_points", Dtype::F32, vec![app.len(), 3]);
        }
        Manifest {
            format_version: BUNDLE_FORMAT_VERSION,
            category: self.category,
            frame_count: t,
            fps: self.fps,
            units: "m".into(),
            particle_count: self.particle_count(),
            particle_volume: self.particle_volume,
            track_count: self.track_count(),
            anchor_count: self.anchor_count(),
            binding_radius: self.binding_radius,
            arrays,
        }
    }

    /// Checks extents, coordinate ranges and the teacher sidecar.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        let t = self.frame_count();
        if t < 1 {
            return fail("bundle holds no frames".into());
        }
        if self.particle_count() == 0 {
            return fail("bundle holds no material particles".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return fail(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.particle_volume.is_finite() && self.particle_volume > 0.0) {
            return fail("particle volume must be positive".into());
        }
        if !(self.binding_radius.is_finite() && self.binding_radius > 0.0) {
            return fail("binding radius must be positive".into());
        }
        if self.tracks.len() != t || self.actuator_anchors.len() != t {
            return fail(format!(
                "{t} target frames but {} track frames and {} anchor frames",
                self.tracks.len(),
                self.actuator_anchors.len()
            ));
        }
        let (k, a) = (self.track_count(), self.anchor_count());
        if let Some(f) = self.tracks.iter().position(|f| f.len() != k) {
            return fail(format!(
                "track frame {f} holds {} tracks, expected {k}",
                self.tracks[f].len()
            ));
        }
        if let Some(f) = self.actuator_anchors.iter().position(|f| f.len() != a) {
            return fail(format!(
                "anchor frame {f} holds {} anchors, expected {a}",
                self.actuator_anchors[f].len()
            ));
        }
        if let Some(f) = self.target_points.iter().position(Vec::is_empty) {
            return fail(format!("target frame {f} is empty"));
        }
        check_points("init_particles", &self.init_particles)?;
        for (name, frames) in [
            ("target_points", &self.target_points),
            ("tracks", &self.tracks),
            ("actuator_anchors", &self.actuator_anchors),
        ] {
            for pts in frames {
                check_points(name, pts)?;
            }
        }
        if let Some(app) = &self.appearance_points {
            if app.is_empty() {
                return fail("appearance group is present but empty".into());
            }
            check_points("appearance_points", app)?;
        }
        if let Some(teacher) = &self.teacher {
            teacher.materials.validate()?;
            if teacher.materials.particle_count() != self.particle_count() {
                return fail("teacher material field disagrees on the particle count".into());
            }
            if teacher.track_particles.len() != k
                || teacher
                    .track_particles
                    .iter()
                    .any(|&p| p >= self.particle_count())
            {
                return fail("teacher track indices disagree with the track group".into());
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        let spec = |name: &str| &manifest.arrays[name];
        write_f32(dir, spec("init_particles"), self.init_particles.iter())?;
        write_f32(
            dir,
            spec("target_points"),
            self.target_points.iter().flatten(),
        )?;
        let mut offsets = vec![0u32];
        for frame in &self.target_points {
            let end = *offsets.last().expect("offsets start at 0") as usize + frame.len();
            offsets.push(
                u32::try_from(end)
                    .map_err(|_| Error::Validation("too many target points".into()))?,
            );
        }
        write_bytes(
            dir,
            spec("target_offsets"),
            offsets.iter().flat_map(|o| o.to_le_bytes()).collect(),
        )?;
        write_f32(dir, spec("tracks"), self.tracks.iter().flatten())?;
        write_f32(
            dir,
            spec("actuator_anchors"),
            self.actuator_anchors.iter().flatten(),
        )?;
        if let Some(app) = &self.appearance_points {
            write_f32(dir, spec("appearance_points"), app.iter())?;
        }
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))?;
        let teacher_path = dir.join(TEACHER_FILE);
        match &self.teacher {
            Some(teacher) => std::fs::write(&teacher_path, serde_json::to_string_pretty(teacher)?)
                .map_err(|e| Error::io(&teacher_path, e))?,
            None if teacher_path.exists() => {
                std::fs::remove_file(&teacher_path).map_err(|e| Error::io(&teacher_path, e))?
            }
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("manifest: {e}")))?;
        check_manifest(&manifest)?;
        let t = manifest.frame_count;
        let (n, k, a) = (
            manifest.particle_count,
            manifest.track_count,
            manifest.anchor_count,
        );
        let spec = |name: &str| &manifest.arrays[name];

        let init_particles = read_f32(dir, "init_particles", spec("init_particles"))?;
        let offsets = read_u32(dir, "target_offsets", spec("target_offsets"))?;
        let flat_targets = read_f32(dir, "target_points", spec("target_points"))?;
        if offsets.first() != Some(&0)
            || offsets.windows(2).any(|w| w[1] < w[0])
            || offsets.last().map(|&o| o as usize) != Some(flat_targets.len())
        {
            return Err(Error::ArrayGroup {
                group: "target_offsets".into(),
                reason: format!("offsets must rise from 0 to {}", flat_targets.len()),
            });
        }
        let target_points = offsets
            .windows(2)
            .map(|w| flat_targets[w[0] as usize..w[1] as usize].to_vec())
            .collect();
        let tracks = chunk(read_f32(dir, "tracks", spec("tracks"))?, k, t);
        let actuator_anchors = chunk(
            read_f32(dir, "actuator_anchors", spec("actuator_anchors"))?,
            a,
            t,
        );
        let appearance_points = match manifest.arrays.get("appearance_points") {
            Some(s) => Some(read_f32(dir, "appearance_points", s)?),
            None => None,
        };
        let teacher_path = dir.join(TEACHER_FILE);
        let teacher = if teacher_path.exists() {
            let text =
                std::fs::read_to_string(&teacher_path).map_err(|e| Error::io(&teacher_path, e))?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| Error::Validation(format!("teacher sidecar: {e}")))?,
            )
        } else {
            None
        };
        debug_assert_eq!(init_particles.len(), n);
        let bundle = SequenceBundle {
            category: manifest.category,
            fps: manifest.fps,
            particle_volume: manifest.particle_volume,
            binding_radius: manifest.binding_radius,
            init_particles,
            target_points,
            tracks,
            actuator_anchors,
            appearance_points,
            teacher,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

fn check_points(group: &str, points: &[Point]) -> Result<()> {
    match points
        .iter()
        .flatten()
        .find(|c| !(c.is_finite() && (0.0..=1.0).contains(*c)))
    {
        Some(c) => Err(Error::ArrayGroup {
            group: group.into(),
            reason: format!("coordinate {c} lies outside the unit cube"),
        }),
        None => Ok(()),
    }
}

fn check_manifest(m: &Manifest) -> Result<()> {
    let fail = |msg: String| Err(Error::Validation(msg));
    if m.format_version != BUNDLE_FORMAT_VERSION {
        return fail(format!("unsupported format version {}", m.format_version));
    }
    if m.units != "m" {
        return fail(format!("units must be `m`, got `{}`", m.units));
    }
    if m.frame_count == 0 || m.particle_count == 0 {
        return fail("frame and particle counts must be positive".into());
    }
    let expected: [(&str, Dtype, Option<Vec<usize>>); 5] = [
        (
            "init_particles",
            Dtype::F32,
            Some(vec![m.particle_count, 3]),
        ),
        ("target_points", Dtype::F32, None),
        ("target_offsets", Dtype::U32, Some(vec![m.frame_count + 1])),
        (
            "tracks",
            Dtype::F32,
            Some(vec![m.frame_count, m.track_count, 3]),
        ),
        (
            "actuator_anchors",
            Dtype::F32,
            Some(vec![m.frame_count, m.anchor_count, 3]),
        ),
    ];
    for (name, dtype, shape) in &expected {
        let Some(spec) = m.arrays.get(*name) else {
            return fail(format!("manifest lacks array group `{name}`"));
        };
        if spec.dtype != *dtype {
            return fail(format!("group `{name}` must be {dtype:?}"));
        }
        let shape_ok = match shape {
            Some(s) => &spec.shape == s,
            None => spec.shape.len() == 2 && spec.shape[1] == 3,
        };
        if !shape_ok {
            return fail(format!(
                "group `{name}` has shape {:?}, inconsistent with the manifest counts",
                spec.shape
            ));
        }
    }
    for (name, spec) in &m.arrays {
        let known = expected.iter().any(|(n, ..)| n == name);
        if !known && name != "appearance_points" {
            return fail(format!("unknown array group `{name}`"));
        }
        if name == "appearance_points"
            && (spec.dtype != Dtype::F32 || spec.shape.len() != 2 || spec.shape[1] != 3)
        {
            return fail("group `appearance_points` must be f32 with shape [P, 3]".into());
        }
        if spec.file.contains(['/', '\\']) || spec.file.starts_with('.') {
            return fail(format!(
                "group `{name}` names an unsafe file `{}`",
                spec.file
            ));
        }
    }
    Ok(())
}

fn read_bytes(dir: &Path, group: &str, spec: &ArraySpec) -> Result<Vec<u8>> {
    let path = dir.join(&spec.file);
    let bytes = std::fs::read(&path).map_err(|e| Error::ArrayGroup {
        group: group.into(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    let expected = spec.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::ArrayGroup {
            group: group.into(),
            reason: format!(
                "expected {expected} bytes for shape {:?}, found {}",
                spec.shape,
                bytes.len()
            ),
        });
    }
    Ok(bytes)
}

fn read_f32(dir: &Path, group: &str, spec: &ArraySpec) -> Result<Vec<Point>> {
    let bytes = read_bytes(dir, group, spec)?;
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            std::array::from_fn(|i| {
                f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes"))
            })
        })
        .collect())
}

fn read_u32(dir: &Path, group: &str, spec: &ArraySpec) -> Result<Vec<u32>> {
    let bytes = read_bytes(dir, group, spec)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn chunk(flat: Vec<Point>, width: usize, frames: usize) -> Vec<Vec<Point>> {
    if width == 0 {
        return vec![Vec::new(); frames];
    }
    flat.chunks(width).map(<[Point]>::to_vec).collect()
}

fn write_bytes(dir: &Path, spec: &ArraySpec, bytes: Vec<u8>) -> Result<()> {
    let path = dir.join(&spec.file);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn write_f32<'a>(
    dir: &Path,
    spec: &ArraySpec,
    points: impl Iterator<Item = &'a Point>,
) -> Result<()> {
    write_bytes(
        dir,
        spec,
        points.flatten().flat_map(|c| c.to_le_bytes()).collect(),
    )
}
