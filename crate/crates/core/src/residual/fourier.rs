//! Sinusoidal coordinate encoding.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math::Vec3;

/// `[x, y, z, sin(2^j π ·), cos(2^j π ·) for j = 0..]`, each band laid out
/// as three sines then three cosines, truncated to `dim` entries.
pub fn fourier_encode(x: &Vec3, bands: usize, dim: usize) -> Result<Vec<f64>> {
    if dim > 3 + 6 * bands {
        return Err(Error::arg(format!(
            "encoding dim {dim} exceeds {} for {bands} bands",
            3 + 6 * bands
        )));
    }
    let mut out = Vec::with_capacity(3 + 6 * bands);
    out.extend_from_slice(x.as_slice());
    for j in 0..bands {
        let f = (1u64 << j) as f64 * PI;
        out.extend(x.iter().map(|c| (f * c).sin()));
        out.extend(x.iter().map(|c| (f * c).cos()));
    }
    out.truncate(dim);
    Ok(out)
}

/// Encoding of grid node coordinates mapped to `[-1, 1]`, tabulated per
/// axis index since the encoding is separable.
#[derive(Debug, Clone)]
pub struct NodeEncoding {
    resolution: usize,
    bands: usize,
    dim: usize,
    /// `[index][1 + 2 * bands]`: coordinate, then sin and cos per band.
    table: Vec<f64>,
}

impl NodeEncoding {
    pub fn new(resolution: usize, bands: usize, dim: usize) -> Self {
        let stride = 1 + 2 * bands;
        let mut table = Vec::with_capacity(resolution * stride);
        for i in 0..resolution {
            let c = 2.0 * i as f64 / resolution as f64 - 1.0;
            table.push(c);
            for j in 0..bands {
                let f = (1u64 << j) as f64 * PI;
                table.push((f * c).sin());
                table.push((f * c).cos());
            }
        }
        NodeEncoding {
            resolution,
            bands,
            dim,
            table,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes the encoding of node `index` into `out[..dim]`.
    pub fn encode(&self, index: [usize; 3], out: &mut [f64]) {
        let stride = 1 + 2 * self.bands;
        let row = |a: usize| &self.table[index[a] * stride..(index[a] + 1) * stride];
        let rows = [row(0), row(1), row(2)];
        let mut n = 0;
        for a in 0..3 {
            if n == self.dim {
                return;
            }
            out[n] = rows[a][0];
            n += 1;
        }
        for j in 0..self.bands {
            for trig in 0..2 {
                for a in 0..3 {
                    if n == self.dim {
                        return;
                    }
                    out[n] = rows[a][1 + 2 * j + trig];
                    n += 1;
                }
            }
        }
    }

    /// Normalized coordinate of a node index.
    pub fn coordinate(&self, index: [usize; 3]) -> Vec3 {
        Vec3::from_fn(|a, _| 2.0 * index[a] as f64 / self.resolution as f64 - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_encoding() {
        let g = fourier_encode(&Vec3::zeros(), 2, 15).unwrap();
        assert_eq!(g.len(), 15);
        assert_eq!(&g[..3], &[0.0; 3]);
        assert_eq!(&g[3..6], &[0.0; 3]);
        assert_eq!(&g[6..9], &[1.0; 3]);
        assert_eq!(&g[9..12], &[0.0; 3]);
        assert_eq!(&g[12..15], &[1.0; 3]);
    }

    #[test]
    fn default_dim_truncates_six_bands() {
        let x = Vec3::new(0.1, -0.3, 0.7);
        let six = fourier_encode(&x, 6, 15).unwrap();
        let two = fourier_encode(&x, 2, 15).unwrap();
        assert_eq!(six, two);
        assert_eq!(fourier_encode(&x, 6, 39).unwrap().len(), 39);
        assert!(fourier_encode(&x, 2, 16).is_err());
    }

    #[test]
    fn distinct_points_differ() {
        let a = fourier_encode(&Vec3::new(0.2, 0.2, 0.2), 6, 15).unwrap();
        let b = fourier_encode(&Vec3::new(0.2 + 1e-3, 0.2, 0.2), 6, 15).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn table_matches_direct_encoding() {
        let enc = NodeEncoding::new(32, 6, 15);
        let mut out = vec![0.0; 15];
        for idx in [[0, 0, 0], [3, 17, 31], [16, 16, 16]] {
            enc.encode(idx, &mut out);
            let direct = fourier_encode(&enc.coordinate(idx), 6, 15).unwrap();
            for (a, b) in out.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let enc = NodeEncoding::new(32, 6, 39);
        let mut out = vec![0.0; 39];
        enc.encode([5, 9, 30], &mut out);
        let direct = fourier_encode(&enc.coordinate([5, 9, 30]), 6, 39).unwrap();
        assert!(out.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
