//! Fitted-model directories: `model.json` (solver settings, material field,
//! gains) plus the residual network's `residual.json` / `residual.bin`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actuation::{CouplingMode, DcaGains};
use crate::error::{Error, Result};
use crate::material::MaterialField;
use crate::mpm::SimConfig;
use crate::residual::{ResidualNet, ResidualParams};
use crate::rollout::Model;

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";
pub const RESIDUAL_STEM: &str = "residual";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    format_version: u32,
    sim: SimConfig,
    materials: MaterialField,
    gains: DcaGains,
    coupling: CouplingMode,
    residual: bool,
}

/// Writes `model` into `dir`, creating it if needed.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        sim: model.sim.clone(),
        materials: model.materials.clone(),
        gains: model.gains,
        coupling: model.coupling,
        residual: model.residual.is_some(),
    };
    let path = dir.join(MODEL_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    if let Some(net) = &model.residual {
        net.params.save(dir, RESIDUAL_STEM)?;
    }
    Ok(())
}

/// Reads a model written by [`save_model`]. Material scale is reset to 1
/// and no external force is attached.
pub fn load_model(dir: &Path) -> Result<Model> {
    let path = dir.join(MODEL_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: ModelManifest = serde_json::from_str(&text)?;
    if m.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported model format version {}",
            path.display(),
            m.format_version
        )));
    }
    m.sim.validate()?;
    m.materials.validate()?;
    m.gains.validate()?;
    let mut model = Model::new(m.sim, m.materials);
    model.gains = m.gains;
    model.coupling = m.coupling;
    if m.residual {
        let params = ResidualParams::load(dir, RESIDUAL_STEM)?;
        model.residual = Some(ResidualNet::new(params, model.sim.grid_resolution));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{MaterialBounds, DEFAULT_PATCH_COUNT};
    use crate::math::Vec3;
    use crate::mpm::Category;
    use crate::residual::ResidualConfig;

    fn model(with_residual: bool) -> Model {
        let rest: Vec<Vec3> = (0..80)
            .map(|i| Vec3::new(0.4 + 0.002 * i as f64, 0.5, 0.3 + 0.001 * i as f64))
            .collect();
        let bounds = MaterialBounds::for_category(Category::Planar);
        let mut field =
            MaterialField::init_patches(&rest, DEFAULT_PATCH_COUNT.min(10), bounds).unwrap();
        field.raw_e[3] = 0.7;
        field.logits[2] = [0.1, -0.4, 1.3];
        let mut m = Model::new(SimConfig::for_category(Category::Planar), field);
        m.gains = DcaGains { kp: 321.0, kd: 4.5 };
        if with_residual {
            let cfg = ResidualConfig {
                encoder_widths: vec![8, 8, 8],
                decoder_width: 8,
                ..ResidualConfig::default()
            };
            let mut params = ResidualParams::init(cfg, 3).unwrap();
            let head = params.head_range();
            params.data[head.start] = 0.25;
            m.residual = Some(ResidualNet::new(params, m.sim.grid_resolution));
        }
        m
    }

    #[test]
    fn round_trip_is_exact() {
        for with_residual in [false, true] {
            let m = model(with_residual);
            let dir = tempfile::tempdir().unwrap();
            save_model(&m, dir.path()).unwrap();
            let back = load_model(dir.path()).unwrap();
            assert_eq!(back.sim, m.sim);
            assert_eq!(back.materials, m.materials);
            assert_eq!(back.gains, m.gains);
            assert_eq!(back.residual.is_some(), with_residual);
            if let (Some(a), Some(b)) = (&back.residual, &m.residual) {
                assert_eq!(a.params.data, b.params.data);
            }
        }
    }

    #[test]
    fn rejects_version_and_missing_weights() {
        let m = model(true);
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("residual.bin")).unwrap();
        assert!(load_model(dir.path()).is_err());
        let path = dir.path().join(MODEL_FILE);
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Config(_))));
    }
}
