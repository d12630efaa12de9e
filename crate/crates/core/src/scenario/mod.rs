//! Sequence bundles and the synthetic scenario generator that produces them.

mod bundle;
mod generate;
mod spec;

pub use bundle::{
    to_points, to_vec3, ArraySpec, Dtype, Manifest, Point, SequenceBundle, BUNDLE_FORMAT_VERSION,
    DEFAULT_FPS, MANIFEST_FILE, TEACHER_FILE,
};
pub use generate::{
    gen_scenario, grip_anchors, sample_geometry, script_offset, teacher_field, teacher_model,
};
pub use spec::{
    ActuatorScript, MaterialSpec, Mismatch, MismatchKind, ObjectKind, ScenarioSpec, ScriptKind,
    Teacher, TeacherMaterials,
};
