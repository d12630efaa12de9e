//! Flat parameter storage with a named-shape manifest.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residual::ResidualConfig;

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of a dense layer `y = W x + b` with `W` row-major `[rows, cols]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

/// Resolved parameter offsets for one [`ResidualConfig`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub encoder: Vec<Dense>,
    pub norms: Vec<Norm>,
    pub decoder: Vec<Dense>,
    pub head: Dense,
    pub specs: Vec<TensorSpec>,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &ResidualConfig) -> Self {
        let mut specs = Vec::new();
        let mut len = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let spec = TensorSpec {
                name,
                shape,
                offset: len,
            };
            len += spec.len();
            let off = spec.offset;
            specs.push(spec);
            off
        };
        let dense = |push: &mut dyn FnMut(String, Vec<usize>) -> usize,
                     name: &str,
                     rows: usize,
                     cols: usize| Dense {
            w: push(format!("{name}.weight"), vec![rows, cols]),
            b: push(format!("{name}.bias"), vec![rows]),
            rows,
            cols,
        };
        let mut encoder = Vec::new();
        let mut norms = Vec::new();
        let mut cols = cfg.input_dim();
        let last = cfg.encoder_widths.len() - 1;
        for (i, &w) in cfg.encoder_widths.iter().enumerate() {
            encoder.push(dense(&mut push, &format!("encoder.{i}"), w, cols));
            if i < last {
                norms.push(Norm {
                    gamma: push(format!("encoder.{i}.norm.weight"), vec![w]),
                    beta: push(format!("encoder.{i}.norm.bias"), vec![w]),
                });
            }
            cols = w;
        }
        let din = cfg.decoder_input_dim();
        let mut decoder = Vec::new();
        for i in 0..cfg.decoder_layers {
            let cols = match (i, cfg.is_skip_layer(i)) {
                (0, _) => din,
                (_, true) => cfg.decoder_width + din,
                _ => cfg.decoder_width,
            };
            decoder.push(dense(
                &mut push,
                &format!("decoder.{i}"),
                cfg.decoder_width,
                cols,
            ));
        }
        let head = dense(&mut push, "decoder.head", 3, cfg.decoder_width);
        Layout {
            encoder,
            norms,
            decoder,
            head,
            specs,
            len,
        }
    }
}

/// Residual network weights as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualParams {
    pub config: ResidualConfig,
    pub data: Vec<f64>,
    pub(crate) layout: Layout,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ResidualConfig,
    count: usize,
    tensors: Vec<TensorSpec>,
}

impl ResidualParams {
    /// Uniform `±1/sqrt(fan_in)` weights and biases, unit norm scales,
    /// and a zero output head so the initial correction vanishes.
    pub fn init(config: ResidualConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in layout.encoder.iter().chain(&layout.decoder) {
            let bound = 1.0 / (d.cols as f64).sqrt();
            for v in &mut data[d.w..d.w + d.rows * d.cols] {
                *v = rng.random_range(-bound..bound);
            }
            for v in &mut data[d.b..d.b + d.rows] {
                *v = rng.random_range(-bound..bound);
            }
        }
        let widths = &config.encoder_widths;
        for (n, w) in layout.norms.iter().zip(widths) {
            data[n.gamma..n.gamma + w].fill(1.0);
        }
        Ok(ResidualParams {
            config,
            data,
            layout,
        })
    }

    pub fn zeros(config: ResidualConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(ResidualParams {
            data: vec![0.0; layout.len],
            config,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.specs
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.specs.iter().find(|s| s.name == name)?.range();
        Some(&mut self.data[range])
    }

    /// Offset range of the output head (weights then bias).
    pub fn head_range(&self) -> std::ops::Range<usize> {
        let h = self.layout.head;
        h.w..h.b + h.rows
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let manifest = Manifest {
            format_version: PARAMS_FORMAT_VERSION,
            config: self.config.clone(),
            count: self.data.len(),
            tensors: self.layout.specs.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let fail = |reason: String| Error::ArrayGroup {
            group: stem.to_string(),
            reason,
        };
        if manifest.format_version != PARAMS_FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        manifest.config.validate()?;
        let layout = Layout::new(&manifest.config);
        if manifest.tensors != layout.specs || manifest.count != layout.len {
            return Err(fail(
                "tensor manifest does not match the network configuration".into(),
            ));
        }
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != 8 * layout.len {
            return Err(fail(format!(
                "expected {} bytes, found {}",
                8 * layout.len,
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite parameter".into()));
        }
        Ok(ResidualParams {
            config: manifest.config,
            data,
            layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_is_contiguous() {
        let p = ResidualParams::init(ResidualConfig::default(), 0).unwrap();
        let mut next = 0;
        for s in p.tensors() {
            assert_eq!(s.offset, next);
            next += s.len();
        }
        assert_eq!(next, p.len());
        assert_eq!(p.tensor("encoder.0.weight").unwrap().len(), 64 * 27);
        assert_eq!(p.tensor("decoder.0.weight").unwrap().len(), 128 * 79);
        assert_eq!(
            p.tensor("decoder.3.weight").unwrap().len(),
            128 * (128 + 79)
        );
        assert_eq!(p.tensor("decoder.head.weight").unwrap().len(), 3 * 128);
        assert!(p.tensor("encoder.2.norm.weight").is_none());
        assert!(p.data[p.head_range()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ResidualConfig {
            decoder_width: 16,
            ..ResidualConfig::default()
        };
        let mut p = ResidualParams::init(cfg, 7).unwrap();
        let head = p.head_range();
        p.data[head].fill(0.25);
        p.save(dir.path(), "residual").unwrap();
        let q = ResidualParams::load(dir.path(), "residual").unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = ResidualParams::init(ResidualConfig::default(), 1).unwrap();
        p.save(dir.path(), "residual").unwrap();
        let bin = dir.path().join("residual.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            ResidualParams::load(dir.path(), "residual"),
            Err(Error::ArrayGroup { .. })
        ));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = ResidualParams::init(ResidualConfig::default(), 3).unwrap();
        let b = ResidualParams::init(ResidualConfig::default(), 3).unwrap();
        let c = ResidualParams::init(ResidualConfig::default(), 4).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }
}
