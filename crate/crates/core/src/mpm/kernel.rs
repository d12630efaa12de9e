//! Quadratic B-spline interpolation stencil (3 nodes per axis, 27 in 3D).

use crate::error::{Error, Result};
use crate::math::Vec3;

/// One supporting node of a particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeWeight {
    pub index: [usize; 3],
    pub weight: f64,
    /// Node position minus particle position, meters.
    pub offset: Vec3,
}

#[inline]
fn axis_weights(fx: f64) -> ([f64; 3], [f64; 3]) {
    let a = 1.5 - fx;
    let b = fx - 1.0;
    let c = fx - 0.5;
    ([0.5 * a * a, 0.75 - b * b, 0.5 * c * c], [-a, -2.0 * b, c])
}

/// Per-particle interpolation data: weights, weight gradients and offsets.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stencil {
    pub base: [usize; 3],
    /// Fractional position relative to `base`, in cells, per axis.
    pub fx: [f64; 3],
    pub w: [[f64; 3]; 3],
    /// Derivative of the axis weights w.r.t. position (1/m).
    pub dw: [[f64; 3]; 3],
}

impl Stencil {
    pub fn new(x: &Vec3, resolution: usize, particle: usize) -> Result<Self> {
        let inv_dx = resolution as f64;
        let mut st = Stencil::default();
        for a in 0..3 {
            let xs = x[a] * inv_dx;
            let base = (xs - 0.5).floor();
            if !xs.is_finite() || base < 0.0 || base + 2.0 > (resolution - 1) as f64 {
                return Err(Error::Domain {
                    particle,
                    position: [x[0], x[1], x[2]],
                });
            }
            let fx = xs - base;
            let (w, dw) = axis_weights(fx);
            st.base[a] = base as usize;
            st.fx[a] = fx;
            st.w[a] = w;
            st.dw[a] = dw.map(|d| d * inv_dx);
        }
        Ok(st)
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        self.w[0][i] * self.w[1][j] * self.w[2][k]
    }

    #[inline]
    pub fn weight_grad(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.dw[0][i] * self.w[1][j] * self.w[2][k],
            self.w[0][i] * self.dw[1][j] * self.w[2][k],
            self.w[0][i] * self.w[1][j] * self.dw[2][k],
        )
    }

    /// Node position minus particle position.
    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize, dx: f64) -> Vec3 {
        Vec3::new(
            (i as f64 - self.fx[0]) * dx,
            (j as f64 - self.fx[1]) * dx,
            (k as f64 - self.fx[2]) * dx,
        )
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize, k: usize) -> [usize; 3] {
        [self.base[0] + i, self.base[1] + j, self.base[2] + k]
    }

    #[inline]
    pub fn flat_node(&self, i: usize, j: usize, k: usize, res: usize) -> usize {
        ((self.base[0] + i) * res + self.base[1] + j) * res + self.base[2] + k
    }

    pub fn nodes(&self, dx: f64) -> [NodeWeight; 27] {
        let mut out = [NodeWeight {
            index: [0; 3],
            weight: 0.0,
            offset: Vec3::zeros(),
        }; 27];
        let mut n = 0;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[n] = NodeWeight {
                        index: self.node(i, j, k),
                        weight: self.weight(i, j, k),
                        offset: self.offset(i, j, k, dx),
                    };
                    n += 1;
                }
            }
        }
        out
    }
}

/// The 27 supporting nodes of a particle at `position` on a grid with
/// `resolution` nodes per axis spanning the unit cube.
pub fn kernel_weights(position: &Vec3, resolution: usize) -> Result<[NodeWeight; 27]> {
    let st = Stencil::new(position, resolution, 0)?;
    Ok(st.nodes(1.0 / resolution as f64))
}
