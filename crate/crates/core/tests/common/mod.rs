//! Shared fixtures for the integration and acceptance targets.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use softtwin_core::scenario::{gen_scenario, ObjectKind, ScenarioSpec, SequenceBundle};

/// Small generated bundle with every optional group present.
pub fn small_bundle(seed: u64) -> SequenceBundle {
    let mut spec = ScenarioSpec::for_kind(ObjectKind::Rope);
    spec.size = [0.12, 0.03, 0.03];
    spec.frames = 5;
    spec.script.duration = 5;
    spec.patches = 8;
    spec.tracks = 6;
    spec.appearance_per_particle = 2;
    gen_scenario(&spec, seed).expect("small bundle")
}

const ARRAY_FILES: [&str; 6] = [
    "init_particles.f32",
    "target_points.f32",
    "target_offsets.u32",
    "tracks.f32",
    "actuator_anchors.f32",
    "appearance_points.f32",
];
const F32_FILES: [&str; 5] = [
    "init_particles.f32",
    "target_points.f32",
    "tracks.f32",
    "actuator_anchors.f32",
    "appearance_points.f32",
];
const GROUPS: [&str; 6] = [
    "init_particles",
    "target_points",
    "target_offsets",
    "tracks",
    "actuator_anchors",
    "appearance_points",
];
const FAMILIES: usize = 20;

fn edit_json(path: &Path, f: impl FnOnce(&mut Value)) {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

fn edit_bytes(path: &Path, f: impl FnOnce(&mut Vec<u8>)) {
    let mut b = std::fs::read(path).unwrap();
    f(&mut b);
    std::fs::write(path, b).unwrap();
}

/// Applies corruption `case` to the valid bundle saved in `dir` and
/// returns a one-line description. Every case yields an inconsistent
/// bundle; none merely changes a value to another valid one.
pub fn corrupt(dir: &Path, case: usize, rng: &mut ChaCha8Rng) -> String {
    let manifest = dir.join("manifest.json");
    let pick =
        |rng: &mut ChaCha8Rng, names: &[&'static str]| names[rng.random_range(0..names.len())];
    match case % FAMILIES {
        0 => {
            let file = pick(rng, &ARRAY_FILES);
            let mut cut = 0;
            edit_bytes(&dir.join(file), |b| {
                cut = rng.random_range(1..=b.len());
                b.truncate(b.len() - cut);
            });
            format!("truncate {file} by {cut} bytes")
        }
        1 => {
            let file = pick(rng, &ARRAY_FILES);
            let extra = rng.random_range(1..64);
            edit_bytes(&dir.join(file), |b| b.extend((0..extra).map(|i| i as u8)));
            format!("append {extra} bytes to {file}")
        }
        2 => {
            let file = pick(rng, &ARRAY_FILES);
            std::fs::remove_file(dir.join(file)).unwrap();
            format!("delete {file}")
        }
        3 => {
            let file = pick(rng, &F32_FILES);
            let bad = [
                1.5f32,
                -0.25,
                f32::NAN,
                f32::INFINITY,
                f32::NEG_INFINITY,
                7e30,
            ][rng.random_range(0..6)];
            let mut at = 0;
            edit_bytes(&dir.join(file), |b| {
                at = 4 * rng.random_range(0..b.len() / 4);
                b[at..at + 4].copy_from_slice(&bad.to_le_bytes());
            });
            format!("write {bad} at byte {at} of {file}")
        }
        4 => {
            let key = pick(
                rng,
                &[
                    "particle_count",
                    "frame_count",
                    "track_count",
                    "anchor_count",
                ],
            );
            let delta = [-1i64, 1, 2, 17][rng.random_range(0..4)];
            edit_json(&manifest, |v| {
                let n = v[key].as_i64().unwrap();
                v[key] = Value::from((n + delta).max(0) + if n + delta < 0 { 1 } else { 0 });
            });
            format!("manifest {key} off by {delta}")
        }
        5 => {
            let group = pick(rng, &GROUPS);
            let axis = rng.random_range(0..2);
            edit_json(&manifest, |v| {
                let shape = &mut v["arrays"][group]["shape"][axis];
                *shape = Value::from(shape.as_u64().unwrap() + 1);
            });
            format!("manifest shape axis {axis} of {group} grown")
        }
        6 => {
            let group = pick(rng, &GROUPS);
            edit_json(&manifest, |v| {
                let d = &mut v["arrays"][group]["dtype"];
                *d = Value::from(if d == "f32" { "u32" } else { "f32" });
            });
            format!("manifest dtype of {group} swapped")
        }
        7 => {
            let group = pick(rng, &GROUPS[..5]);
            edit_json(&manifest, |v| {
                v["arrays"].as_object_mut().unwrap().remove(group);
            });
            format!("manifest drops required group {group}")
        }
        8 => {
            let group = pick(rng, &GROUPS);
            let name = ["missing.f32", "../escape.f32", ".hidden"][rng.random_range(0..3)];
            edit_json(&manifest, |v| {
                v["arrays"][group]["file"] = Value::from(name);
            });
            format!("manifest points {group} at {name}")
        }
        9 => {
            let mut cut = 0;
            edit_bytes(&manifest, |b| {
                cut = rng.random_range(1..b.len());
                b.truncate(cut);
            });
            format!("manifest truncated to {cut} bytes")
        }
        10 => {
            let version = rng.random_range(2..100u32);
            edit_json(&manifest, |v| v["format_version"] = Value::from(version));
            format!("manifest format version {version}")
        }
        11 => {
            let units = pick(rng, &["mm", "cm", "", "inch"]);
            edit_json(&manifest, |v| v["units"] = Value::from(units));
            format!("manifest units `{units}`")
        }
        12 => {
            let key = pick(rng, &["fps", "particle_volume", "binding_radius"]);
            let bad = [0.0, -1.0, -30.0][rng.random_range(0..3)];
            edit_json(&manifest, |v| v[key] = Value::from(bad));
            format!("manifest {key} = {bad}")
        }
        13 => {
            let category = pick(rng, &["gel", "Linear", "", "3"]);
            edit_json(&manifest, |v| v["category"] = Value::from(category));
            format!("manifest category `{category}`")
        }
        14 => {
            let path = dir.join("target_offsets.u32");
            let mut which = 0;
            edit_bytes(&path, |b| {
                let n = b.len() / 4;
                which = rng.random_range(0..n);
                let old = u32::from_le_bytes(b[4 * which..4 * which + 4].try_into().unwrap());
                let new = if which == 0 {
                    old + 1
                } else {
                    old.wrapping_add(1_000_000)
                };
                b[4 * which..4 * which + 4].copy_from_slice(&new.to_le_bytes());
            });
            format!("target offset {which} pushed out of order")
        }
        15 => {
            let path = dir.join("teacher.json");
            let mut cut = 0;
            edit_bytes(&path, |b| {
                cut = rng.random_range(1..b.len());
                b.truncate(cut);
            });
            format!("teacher sidecar truncated to {cut} bytes")
        }
        16 => {
            let bad = rng.random_range(10_000..20_000u64);
            edit_json(&dir.join("teacher.json"), |v| {
                v["track_particles"][0] = Value::from(bad);
            });
            format!("teacher track index {bad}")
        }
        17 => {
            edit_json(&dir.join("teacher.json"), |v| {
                v["materials"]["bindings"].as_array_mut().unwrap().pop();
            });
            "teacher material field loses a particle".into()
        }
        18 => {
            let group = pick(rng, &["tracks", "actuator_anchors", "init_particles"]);
            edit_json(&manifest, |v| {
                v["arrays"][group]["shape"]
                    .as_array_mut()
                    .unwrap()
                    .push(Value::from(1));
            });
            format!("manifest shape of {group} gains an axis")
        }
        _ => {
            let extra = pick(rng, &["normals", "colors", "tracks2"]);
            edit_json(&manifest, |v| {
                v["arrays"][extra] = serde_json::json!({"file": format!("{extra}.f32"), "dtype": "f32", "shape": [1, 3]});
            });
            format!("manifest lists unknown group {extra}")
        }
    }
}

/// Saves `bundle`, applies `cases` seeded corruptions one at a time and
/// returns the descriptions of those the loader accepted.
pub fn corruption_fuzz(bundle: &SequenceBundle, cases: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted = Vec::new();
    for case in 0..cases {
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let what = corrupt(dir.path(), case, &mut rng);
        if SequenceBundle::load(dir.path()).is_ok() {
            accepted.push(format!("case {case}: {what}"));
        }
    }
    accepted
}
