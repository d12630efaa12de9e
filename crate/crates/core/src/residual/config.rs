use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and training hyperparameters of the residual velocity network.
///
/// Key names are the ones accepted in the `[residual]` table of a config
/// file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    /// Past frames fed to the encoder.
    pub history: usize,
    /// Hidden and output widths of the per-particle encoder; the last
    /// entry is the feature size.
    pub encoder_widths: Vec<usize>,
    /// Group-normalization groups on every encoder layer but the last.
    pub norm_groups: usize,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    /// Frequency bands available to the coordinate encoding.
    pub fourier_bands: usize,
    /// Length of the coordinate encoding; truncates the band expansion.
    pub fourier_dim: usize,
    /// Output bound, m/s.
    pub alpha: f64,
    pub reg_weight: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        ResidualConfig {
            history: 3,
            encoder_widths: vec![64, 128, 64],
            norm_groups: 8,
            decoder_width: 128,
            decoder_layers: 4,
            fourier_bands: 6,
            fourier_dim: 15,
            alpha: 1.0,
            reg_weight: 1e-3,
            learning_rate: 5e-3,
            grad_clip: 5.0,
        }
    }
}

impl ResidualConfig {
    /// Encoder input channels: `x̃, ṽ, x̃ - x_prev` plus `(x, v)` per
    /// history frame.
    pub fn input_dim(&self) -> usize {
        9 + 6 * self.history
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    /// Decoder input: feature plus coordinate encoding.
    pub fn decoder_input_dim(&self) -> usize {
        self.feature_dim() + self.fourier_dim
    }

    /// Decoder hidden layers that also see the decoder input.
    pub fn is_skip_layer(&self, layer: usize) -> bool {
        layer % 4 == 3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return fail("encoder widths must be non-empty and positive".into());
        }
        if self.norm_groups == 0 {
            return fail("norm_groups must be positive".into());
        }
        let hidden = &self.encoder_widths[..self.encoder_widths.len() - 1];
        if let Some(w) = hidden.iter().find(|w| *w % self.norm_groups != 0) {
            return fail(format!(
                "encoder width {w} is not divisible by {} groups",
                self.norm_groups
            ));
        }
        if self.decoder_width == 0 || self.decoder_layers == 0 {
            return fail("decoder width and depth must be positive".into());
        }
        if self.fourier_dim < 3 || self.fourier_dim > 3 + 6 * self.fourier_bands {
            return fail(format!(
                "fourier_dim {} must lie in [3, {}] for {} bands",
                self.fourier_dim,
                3 + 6 * self.fourier_bands,
                self.fourier_bands
            ));
        }
        if !(self.alpha > 0.0) {
            return fail("alpha must be positive".into());
        }
        if !(self.reg_weight >= 0.0 && self.learning_rate > 0.0 && self.grad_clip > 0.0) {
            return fail(
                "reg_weight must be non-negative, learning_rate and grad_clip positive".into(),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dimensions() {
        let c = ResidualConfig::default();
        c.validate().unwrap();
        assert_eq!(c.input_dim(), 27);
        assert_eq!(c.feature_dim(), 64);
        assert_eq!(c.decoder_input_dim(), 79);
        assert_eq!(
            (0..4).filter(|&l| c.is_skip_layer(l)).collect::<Vec<_>>(),
            vec![3]
        );
    }

    #[test]
    fn rejects_bad_shapes() {
        let bad = ResidualConfig {
            encoder_widths: vec![60, 128, 64],
            ..ResidualConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ResidualConfig {
            fourier_dim: 40,
            ..ResidualConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ResidualConfig {
            alpha: 0.0,
            ..ResidualConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ResidualConfig {
            decoder_width: 32,
            ..ResidualConfig::default()
        };
        let s = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ResidualConfig>(&s).unwrap(), c);
        assert!(toml::from_str::<ResidualConfig>("unknown = 1").is_err());
    }
}
