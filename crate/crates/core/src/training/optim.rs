use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "Adam needs lr >= 0, betas in [0, 1) and eps > 0".into(),
            ))
        }
    }
}

/// First and second moment estimates of one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::arg(format!(
                "Adam state holds {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Clamps every entry to `[-limit, limit]`.
pub fn clip_values(g: &mut [f64], limit: f64) {
    for x in g {
        *x = x.clamp(-limit, limit);
    }
}

/// Rescales `g` to at most `max_norm`; returns the norm before clipping.
pub fn clip_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, 2);
        let mut p = vec![0.3, 0.7];
        for _ in 0..10 {
            adam.step(&mut p, &[1.0, -4.0]).unwrap();
        }
        assert_eq!(p, vec![0.3, 0.7]);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![0.0, 0.0];
        let mut prev = p.clone();
        for _ in 0..200 {
            prev.copy_from_slice(&p);
            adam.step(&mut p, &[3.0, -0.01]).unwrap();
        }
        assert!(((prev[0] - p[0]) - 5e-3).abs() < 1e-8);
        assert!(((p[1] - prev[1]) - 5e-3).abs() < 1e-8);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig::default(), 1);
        let mut p = vec![1.0];
        adam.step(&mut p, &[42.0]).unwrap();
        assert!((p[0] - (1.0 - 5e-3)).abs() < 1e-10);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, -0.5, -7.0];
        clip_values(&mut g, 1.0);
        assert_eq!(g, vec![1.0, -0.5, -1.0]);
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut g = vec![0.1, 0.1];
        clip_norm(&mut g, 1.0);
        assert_eq!(g, vec![0.1, 0.1]);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        assert!(adam.step(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
