//! Per-particle encoder, coordinate-conditioned node decoder and the
//! kernel-weighted velocity correction, with reverse-mode gradients.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mpm::{NodeWeight, ParticleState, SimConfig, Stencil};
use crate::residual::fourier::NodeEncoding;
use crate::residual::params::{Dense, ResidualParams};

const NORM_EPS: f64 = 1e-5;

/// Positions and velocities of one past frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
}

impl Kinematics {
    pub fn of(state: &ParticleState) -> Self {
        Kinematics {
            x: state.x.clone(),
            v: state.v.clone(),
        }
    }
}

/// The `H` frames preceding the previous state, most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicHistory {
    pub frames: Vec<Kinematics>,
}

impl KinematicHistory {
    /// History for the step leaving frame `t`: frames `t-1, ..., t-H`,
    /// with indices below zero replaced by frame 0.
    pub fn gather(past: &[Kinematics], t: usize, h: usize) -> Result<Self> {
        if past.is_empty() || t >= past.len() {
            return Err(Error::arg(format!(
                "history for frame {t} needs {} recorded frames",
                t + 1
            )));
        }
        let frames = (1..=h).map(|k| past[t.saturating_sub(k)].clone()).collect();
        Ok(KinematicHistory { frames })
    }
}

/// Everything the residual reads for one frame.
#[derive(Debug, Clone, Copy)]
pub struct ResidualInputs<'a> {
    pub tentative: &'a ParticleState,
    /// Positions at the start of the frame.
    pub previous: &'a [Vec3],
    pub history: &'a KinematicHistory,
}

/// Cotangents of the tentative positions and velocities reached through
/// the network. Previous state and history are treated as constants.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
}

/// `Σ_g w_g u_g` over a particle's supporting nodes.
pub fn gather_correction(u: &[Vec3; 27], nodes: &[NodeWeight; 27]) -> Vec3 {
    u.iter().zip(nodes).map(|(u, n)| n.weight * u).sum()
}

/// Applies a velocity correction once per frame: `v += Δv`,
/// `x += Δv Δt`. Positions are clipped to the solver bounds; `F` and `C`
/// are kept.
pub fn apply_correction(tentative: &ParticleState, dv: &[Vec3], cfg: &SimConfig) -> ParticleState {
    let mut s = tentative.clone();
    for p in 0..s.len() {
        s.v[p] += dv[p];
        s.x[p] = (s.x[p] + dv[p] * cfg.frame_dt).map(|c| c.clamp(cfg.clip_min, cfg.clip_max));
    }
    s
}

#[inline]
fn gemv_cols(w: &[f64], cols: usize, c0: usize, x: &[f64], y: &mut [f64]) {
    for (r, y) in y.iter_mut().enumerate() {
        let row = &w[r * cols + c0..r * cols + c0 + x.len()];
        *y += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

#[inline]
fn gemv_t_cols(w: &[f64], cols: usize, c0: usize, ybar: &[f64], xbar: &mut [f64]) {
    for (r, yb) in ybar.iter().enumerate() {
        if *yb == 0.0 {
            continue;
        }
        let row = &w[r * cols + c0..r * cols + c0 + xbar.len()];
        for (xb, a) in xbar.iter_mut().zip(row) {
            *xb += a * yb;
        }
    }
}

#[inline]
fn outer_cols(wbar: &mut [f64], cols: usize, c0: usize, ybar: &[f64], x: &[f64]) {
    for (r, yb) in ybar.iter().enumerate() {
        if *yb == 0.0 {
            continue;
        }
        let row = &mut wbar[r * cols + c0..r * cols + c0 + x.len()];
        for (g, xv) in row.iter_mut().zip(x) {
            *g += yb * xv;
        }
    }
}

/// Group normalization of one particle's channels in place; keeps the
/// normalized values in `hat` and per-group inverse deviations in `inv`.
fn norm_forward(
    y: &mut [f64],
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    hat: &mut [f64],
    inv: &mut [f64],
) {
    let size = y.len() / groups;
    for g in 0..groups {
        let r = g * size..(g + 1) * size;
        let mean = y[r.clone()].iter().sum::<f64>() / size as f64;
        let var = y[r.clone()]
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / size as f64;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        inv[g] = s;
        for c in r {
            hat[c] = (y[c] - mean) * s;
            y[c] = gamma[c] * hat[c] + beta[c];
        }
    }
}

/// Turns the cotangent of the normalized output in `bar` into the
/// cotangent of the pre-normalization input.
fn norm_backward(
    bar: &mut [f64],
    groups: usize,
    gamma: &[f64],
    hat: &[f64],
    inv: &[f64],
    g_gamma: &mut [f64],
    g_beta: &mut [f64],
) {
    let size = bar.len() / groups;
    for g in 0..groups {
        let r = g * size..(g + 1) * size;
        let mut mean_d = 0.0;
        let mut mean_dh = 0.0;
        for c in r.clone() {
            g_gamma[c] += bar[c] * hat[c];
            g_beta[c] += bar[c];
            let d = bar[c] * gamma[c];
            mean_d += d;
            mean_dh += d * hat[c];
        }
        mean_d /= size as f64;
        mean_dh /= size as f64;
        for c in r {
            let d = bar[c] * gamma[c];
            bar[c] = inv[g] * (d - mean_d - hat[c] * mean_dh);
        }
    }
}

/// Per-particle encoder activations.
struct EncoderTrace {
    /// Layer inputs; `inputs[0]` is the raw channel vector.
    inputs: Vec<Vec<f64>>,
    /// Post-normalization, pre-activation values of hidden layers.
    normed: Vec<Vec<f64>>,
    hat: Vec<Vec<f64>>,
    inv: Vec<Vec<f64>>,
    feature: Vec<f64>,
}

/// Per-(particle, node) decoder activations.
struct DecoderTrace {
    gamma: Vec<f64>,
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    out: [f64; 3],
}

/// Residual network bound to a grid resolution.
#[derive(Debug, Clone)]
pub struct ResidualNet {
    pub params: ResidualParams,
    encoding: NodeEncoding,
    resolution: usize,
}

impl ResidualNet {
    pub fn new(params: ResidualParams, resolution: usize) -> Self {
        let c = &params.config;
        let encoding = NodeEncoding::new(resolution, c.fourier_bands, c.fourier_dim);
        ResidualNet {
            params,
            encoding,
            resolution,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.params.config.alpha
    }

    fn check(&self, inputs: &ResidualInputs) -> Result<()> {
        let n = inputs.tentative.len();
        let h = self.params.config.history;
        if inputs.previous.len() != n {
            return Err(Error::arg(format!(
                "previous positions: {} rows for {n} particles",
                inputs.previous.len()
            )));
        }
        if inputs.history.frames.len() != h {
            return Err(Error::arg(format!(
                "history holds {} frames, expected {h}",
                inputs.history.frames.len()
            )));
        }
        if inputs
            .history
            .frames
            .iter()
            .any(|f| f.x.len() != n || f.v.len() != n)
        {
            return Err(Error::arg("history frame has the wrong particle count"));
        }
        Ok(())
    }

    /// Centered encoder channels of every particle, row-major `[N, 9 + 6H]`.
    pub fn encoder_input(&self, inputs: &ResidualInputs) -> Result<Vec<f64>> {
        self.check(inputs)?;
        let s = inputs.tentative;
        let c = s.centroid();
        let din = self.params.config.input_dim();
        let mut out = Vec::with_capacity(s.len() * din);
        for p in 0..s.len() {
            out.extend((s.x[p] - c).iter());
            out.extend(s.v[p].iter());
            out.extend((s.x[p] - inputs.previous[p]).iter());
            for f in &inputs.history.frames {
                out.extend((f.x[p] - c).iter());
                out.extend(f.v[p].iter());
            }
        }
        Ok(out)
    }

    fn encode_one(&self, z: &[f64]) -> EncoderTrace {
        let cfg = &self.params.config;
        let d = &self.params.data;
        let lay = &self.params.layout;
        let last = lay.encoder.len() - 1;
        let mut trace = EncoderTrace {
            inputs: vec![z.to_vec()],
            normed: Vec::new(),
            hat: Vec::new(),
            inv: Vec::new(),
            feature: Vec::new(),
        };
        for (l, layer) in lay.encoder.iter().enumerate() {
            let mut y = d[layer.b..layer.b + layer.rows].to_vec();
            gemv_cols(&d[layer.w..], layer.cols, 0, &trace.inputs[l], &mut y);
            if l == last {
                trace.feature = y;
                break;
            }
            let norm = lay.norms[l];
            let mut hat = vec![0.0; layer.rows];
            let mut inv = vec![0.0; cfg.norm_groups];
            norm_forward(
                &mut y,
                cfg.norm_groups,
                &d[norm.gamma..norm.gamma + layer.rows],
                &d[norm.beta..norm.beta + layer.rows],
                &mut hat,
                &mut inv,
            );
            trace.inputs.push(y.iter().map(|v| v.max(0.0)).collect());
            trace.normed.push(y);
            trace.hat.push(hat);
            trace.inv.push(inv);
        }
        trace
    }

    /// Per-particle latent features, row-major `[N, feature_dim]`.
    pub fn features(&self, inputs: &ResidualInputs) -> Result<Vec<f64>> {
        let z = self.encoder_input(inputs)?;
        let din = self.params.config.input_dim();
        Ok(z.chunks_exact(din)
            .flat_map(|z| self.encode_one(z).feature)
            .collect())
    }

    /// Layer-0 and skip-layer contributions of the feature plus bias.
    fn feature_terms(&self, f: &[f64]) -> Vec<Option<Vec<f64>>> {
        let cfg = &self.params.config;
        let d = &self.params.data;
        let width = cfg.decoder_width;
        self.params
            .layout
            .decoder
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let c0 = match (i, cfg.is_skip_layer(i)) {
                    (0, _) => 0,
                    (_, true) => width,
                    _ => return None,
                };
                let mut y = d[layer.b..layer.b + layer.rows].to_vec();
                gemv_cols(&d[layer.w..], layer.cols, c0, f, &mut y);
                Some(y)
            })
            .collect()
    }

    fn decode_traced(&self, terms: &[Option<Vec<f64>>], node: [usize; 3]) -> DecoderTrace {
        let cfg = &self.params.config;
        let d = &self.params.data;
        let lay = &self.params.layout;
        let fdim = cfg.feature_dim();
        let width = cfg.decoder_width;
        let mut gamma = vec![0.0; cfg.fourier_dim];
        self.encoding.encode(node, &mut gamma);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(lay.decoder.len());
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(lay.decoder.len());
        for (i, layer) in lay.decoder.iter().enumerate() {
            let y = match &terms[i] {
                Some(t) => {
                    let mut y = t.clone();
                    let c0 = if i == 0 { fdim } else { width + fdim };
                    gemv_cols(&d[layer.w..], layer.cols, c0, &gamma, &mut y);
                    if i > 0 {
                        gemv_cols(&d[layer.w..], layer.cols, 0, &act[i - 1], &mut y);
                    }
                    y
                }
                None => {
                    let mut y = d[layer.b..layer.b + layer.rows].to_vec();
                    gemv_cols(&d[layer.w..], layer.cols, 0, &act[i - 1], &mut y);
                    y
                }
            };
            act.push(y.iter().map(|v| v.max(0.0)).collect());
            pre.push(y);
        }
        let head = lay.head;
        let mut o = d[head.b..head.b + 3].to_vec();
        gemv_cols(
            &d[head.w..],
            head.cols,
            0,
            act.last().expect("decoder layers"),
            &mut o,
        );
        DecoderTrace {
            gamma,
            pre,
            act,
            out: [o[0], o[1], o[2]],
        }
    }

    /// Bounded node velocity `α tanh(D(f, γ(x_g)))` for one feature and
    /// grid node.
    pub fn decode(&self, feature: &[f64], node: [usize; 3]) -> Vec3 {
        let terms = self.feature_terms(feature);
        let t = self.decode_traced(&terms, node);
        Vec3::from(t.out.map(|o| self.alpha() * o.tanh()))
    }

    /// Per-particle velocity corrections `Δv_p`.
    pub fn velocity_correction(&self, inputs: &ResidualInputs) -> Result<Vec<Vec3>> {
        let z = self.encoder_input(inputs)?;
        let din = self.params.config.input_dim();
        let alpha = self.alpha();
        let s = inputs.tentative;
        let mut out = Vec::with_capacity(s.len());
        for (p, z) in z.chunks_exact(din).enumerate() {
            let st = Stencil::new(&s.x[p], self.resolution, p)?;
            let enc = self.encode_one(z);
            let terms = self.feature_terms(&enc.feature);
            let mut dv = Vec3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        let t = self.decode_traced(&terms, st.node(i, j, k));
                        dv += st.weight(i, j, k) * Vec3::from(t.out.map(|o| alpha * o.tanh()));
                    }
                }
            }
            out.push(dv);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients of `Σ_p ⟨dv_bar_p, Δv_p⟩` into
    /// `grad` and returns its cotangents w.r.t. the tentative state.
    pub fn backward(
        &self,
        inputs: &ResidualInputs,
        dv_bar: &[Vec3],
        grad: &mut [f64],
    ) -> Result<InputGrads> {
        let z = self.encoder_input(inputs)?;
        let cfg = &self.params.config;
        let d = &self.params.data;
        let lay = &self.params.layout;
        if grad.len() != d.len() {
            return Err(Error::arg(
                "gradient buffer does not match the parameter count",
            ));
        }
        let din = cfg.input_dim();
        let fdim = cfg.feature_dim();
        let width = cfg.decoder_width;
        let alpha = self.alpha();
        let s = inputs.tentative;
        let n = s.len();
        let mut gx = vec![Vec3::zeros(); n];
        let mut gv = vec![Vec3::zeros(); n];
        let mut g_centroid = Vec3::zeros();
        for (p, z) in z.chunks_exact(din).enumerate() {
            let st = Stencil::new(&s.x[p], self.resolution, p)?;
            let enc = self.encode_one(z);
            let terms = self.feature_terms(&enc.feature);
            let mut f_bar = vec![0.0; fdim];
            let mut term_bar: Vec<Vec<f64>> = terms.iter().map(|_| vec![0.0; width]).collect();
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        let t = self.decode_traced(&terms, st.node(i, j, k));
                        let u = Vec3::from(t.out.map(|o| alpha * o.tanh()));
                        gx[p] += st.weight_grad(i, j, k) * u.dot(&dv_bar[p]);
                        let w = st.weight(i, j, k);
                        let o_bar: Vec<f64> = (0..3)
                            .map(|a| {
                                let th = t.out[a].tanh();
                                w * dv_bar[p][a] * alpha * (1.0 - th * th)
                            })
                            .collect();
                        self.decoder_backward(&t, &o_bar, &mut term_bar, grad);
                    }
                }
            }
            for (i, layer) in lay.decoder.iter().enumerate() {
                if terms[i].is_none() {
                    continue;
                }
                let c0 = if i == 0 { 0 } else { width };
                let zb = &term_bar[i];
                for (g, v) in grad[layer.b..layer.b + layer.rows].iter_mut().zip(zb) {
                    *g += v;
                }
                outer_cols(&mut grad[layer.w..], layer.cols, c0, zb, &enc.feature);
                gemv_t_cols(&d[layer.w..], layer.cols, c0, zb, &mut f_bar);
            }
            let z_bar = self.encoder_backward(&enc, f_bar, grad);
            gx[p] +=
                Vec3::new(z_bar[0], z_bar[1], z_bar[2]) + Vec3::new(z_bar[6], z_bar[7], z_bar[8]);
            gv[p] += Vec3::new(z_bar[3], z_bar[4], z_bar[5]);
            g_centroid -= Vec3::new(z_bar[0], z_bar[1], z_bar[2]);
            for h in 0..cfg.history {
                let o = 9 + 6 * h;
                g_centroid -= Vec3::new(z_bar[o], z_bar[o + 1], z_bar[o + 2]);
            }
        }
        let share = g_centroid / n as f64;
        for g in &mut gx {
            *g += share;
        }
        Ok(InputGrads { x: gx, v: gv })
    }

    /// Backpropagates one node's head cotangent; feature-dependent terms
    /// are summed into `term_bar` for a single per-particle pullback.
    fn decoder_backward(
        &self,
        t: &DecoderTrace,
        o_bar: &[f64],
        term_bar: &mut [Vec<f64>],
        grad: &mut [f64],
    ) {
        let cfg = &self.params.config;
        let d = &self.params.data;
        let lay = &self.params.layout;
        let fdim = cfg.feature_dim();
        let width = cfg.decoder_width;
        let head = lay.head;
        let last = lay.decoder.len() - 1;
        outer_cols(&mut grad[head.w..], head.cols, 0, o_bar, &t.act[last]);
        for a in 0..3 {
            grad[head.b + a] += o_bar[a];
        }
        let mut h_bar = vec![0.0; width];
        gemv_t_cols(&d[head.w..], head.cols, 0, o_bar, &mut h_bar);
        for i in (0..lay.decoder.len()).rev() {
            let layer: Dense = lay.decoder[i];
            let zb: Vec<f64> = h_bar
                .iter()
                .zip(&t.pre[i])
                .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                .collect();
            let factored = i == 0 || cfg.is_skip_layer(i);
            if factored {
                for (acc, v) in term_bar[i].iter_mut().zip(&zb) {
                    *acc += v;
                }
                let c0 = if i == 0 { fdim } else { width + fdim };
                outer_cols(&mut grad[layer.w..], layer.cols, c0, &zb, &t.gamma);
            } else {
                for (g, v) in grad[layer.b..layer.b + layer.rows].iter_mut().zip(&zb) {
                    *g += v;
                }
            }
            if i == 0 {
                break;
            }
            outer_cols(&mut grad[layer.w..], layer.cols, 0, &zb, &t.act[i - 1]);
            h_bar.fill(0.0);
            gemv_t_cols(&d[layer.w..], layer.cols, 0, &zb, &mut h_bar);
        }
    }

    fn encoder_backward(&self, enc: &EncoderTrace, f_bar: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        let cfg = &self.params.config;
        let d = &self.params.data;
        let lay = &self.params.layout;
        let mut bar = f_bar;
        for l in (0..lay.encoder.len()).rev() {
            let layer = lay.encoder[l];
            if l < lay.encoder.len() - 1 {
                for (b, y) in bar.iter_mut().zip(&enc.normed[l]) {
                    if *y <= 0.0 {
                        *b = 0.0;
                    }
                }
                let norm = lay.norms[l];
                let (head, tail) = grad.split_at_mut(norm.beta);
                norm_backward(
                    &mut bar,
                    cfg.norm_groups,
                    &d[norm.gamma..norm.gamma + layer.rows],
                    &enc.hat[l],
                    &enc.inv[l],
                    &mut head[norm.gamma..norm.gamma + layer.rows],
                    &mut tail[..layer.rows],
                );
            }
            for (g, v) in grad[layer.b..layer.b + layer.rows].iter_mut().zip(&bar) {
                *g += v;
            }
            outer_cols(&mut grad[layer.w..], layer.cols, 0, &bar, &enc.inputs[l]);
            let mut below = vec![0.0; layer.cols];
            gemv_t_cols(&d[layer.w..], layer.cols, 0, &bar, &mut below);
            bar = below;
        }
        bar
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpm::kernel_weights;
    use crate::residual::ResidualConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ResidualConfig {
        ResidualConfig {
            encoder_widths: vec![8, 8, 6],
            norm_groups: 2,
            decoder_width: 8,
            fourier_bands: 2,
            ..ResidualConfig::default()
        }
    }

    struct Scene {
        state: ParticleState,
        previous: Vec<Vec3>,
        history: KinematicHistory,
    }

    impl Scene {
        fn new(n: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v3 = |lo: f64, hi: f64| Vec3::from_fn(|_, _| rng.random_range(lo..hi));
            let x: Vec<Vec3> = (0..n).map(|_| v3(0.3, 0.7)).collect();
            let mut state = ParticleState::at_rest(x, 1e-6, 1000.0).unwrap();
            for v in &mut state.v {
                *v = v3(-0.5, 0.5);
            }
            let previous = state.x.iter().map(|x| x + v3(-0.02, 0.02)).collect();
            let frames = (0..3)
                .map(|_| Kinematics {
                    x: state.x.iter().map(|x| x + v3(-0.05, 0.05)).collect(),
                    v: (0..n).map(|_| v3(-0.5, 0.5)).collect(),
                })
                .collect();
            Scene {
                state,
                previous,
                history: KinematicHistory { frames },
            }
        }

        fn inputs(&self) -> ResidualInputs<'_> {
            ResidualInputs {
                tentative: &self.state,
                previous: &self.previous,
                history: &self.history,
            }
        }
    }

    fn random_net(cfg: ResidualConfig, seed: u64) -> ResidualNet {
        let mut params = ResidualParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in &mut params.data {
            *v += rng.random_range(-0.3..0.3);
        }
        ResidualNet::new(params, 32)
    }

    #[test]
    fn zero_parameters_give_zero_features_and_output() {
        let net = ResidualNet::new(
            ResidualParams::zeros(ResidualConfig::default()).unwrap(),
            32,
        );
        let scene = Scene::new(4, 1);
        let f = net.features(&scene.inputs()).unwrap();
        assert_eq!(f.len(), 4 * 64);
        assert!(f.iter().all(|v| *v == 0.0));
        assert_eq!(net.decode(&f[..64], [10, 11, 12]), Vec3::zeros());
    }

    #[test]
    fn zero_head_gives_zero_correction() {
        let net = ResidualNet::new(ResidualParams::init(small_config(), 5).unwrap(), 32);
        let scene = Scene::new(6, 2);
        let dv = net.velocity_correction(&scene.inputs()).unwrap();
        assert!(dv.iter().all(|d| *d == Vec3::zeros()));
        let corrected = apply_correction(&scene.state, &dv, &SimConfig::default());
        assert_eq!(corrected, scene.state);
    }

    #[test]
    fn input_has_27_channels() {
        let net = ResidualNet::new(
            ResidualParams::init(ResidualConfig::default(), 0).unwrap(),
            32,
        );
        let scene = Scene::new(3, 3);
        assert_eq!(net.encoder_input(&scene.inputs()).unwrap().len(), 3 * 27);
    }

    #[test]
    fn output_is_bounded_and_scales_with_alpha() {
        let mut net = random_net(small_config(), 4);
        let head = net.params.head_range();
        for v in &mut net.params.data[head] {
            *v *= 100.0;
        }
        let f = vec![0.7, -1.2, 3.0, 0.1, -0.4, 2.2];
        let u1 = net.decode(&f, [12, 14, 9]);
        assert!(u1.iter().all(|c| c.abs() <= 1.0));
        assert!(u1.norm() > 0.0);
        let mut doubled = net.clone();
        doubled.params.config.alpha = 2.0;
        assert_eq!(doubled.decode(&f, [12, 14, 9]), u1 * 2.0);
        let scene = Scene::new(5, 4);
        let dv = net.velocity_correction(&scene.inputs()).unwrap();
        assert!(dv.iter().all(|d| d.amax() <= 1.0));
    }

    #[test]
    fn gather_of_constant_and_hand_set_fields() {
        let x = Vec3::new(0.41, 0.52, 0.63);
        let nodes = kernel_weights(&x, 32).unwrap();
        let u = Vec3::new(0.2, -0.1, 0.4);
        assert!((gather_correction(&[u; 27], &nodes) - u).norm() < 1e-14);
        assert_eq!(
            gather_correction(&[Vec3::zeros(); 27], &nodes),
            Vec3::zeros()
        );
        let mut field = [Vec3::zeros(); 27];
        field[4] = Vec3::new(1.0, 0.0, 0.0);
        field[13] = Vec3::new(0.0, 2.0, 0.0);
        let expect = nodes[4].weight * field[4] + nodes[13].weight * field[13];
        assert!((gather_correction(&field, &nodes) - expect).norm() < 1e-15);
    }

    #[test]
    fn correction_shifts_position_by_frame() {
        let cfg = SimConfig::default();
        let scene = Scene::new(3, 6);
        let mut dv = vec![Vec3::zeros(); 3];
        dv[1] = Vec3::new(0.1, 0.0, 0.0);
        let s = apply_correction(&scene.state, &dv, &cfg);
        assert!((s.x[1][0] - scene.state.x[1][0] - 0.1 / 30.0).abs() < 1e-15);
        assert_eq!(s.x[0], scene.state.x[0]);
        assert_eq!(s.v[1], scene.state.v[1] + dv[1]);
        for p in 0..3 {
            assert_eq!(s.f[p], scene.state.f[p]);
            assert_eq!(s.c[p], scene.state.c[p]);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let net = random_net(small_config(), 8);
        let scene = Scene::new(6, 9);
        let dv = net.velocity_correction(&scene.inputs()).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let pick = |v: &[Vec3]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut state = scene.state.clone();
        state.x = pick(&scene.state.x);
        state.v = pick(&scene.state.v);
        let history = KinematicHistory {
            frames: scene
                .history
                .frames
                .iter()
                .map(|f| Kinematics {
                    x: pick(&f.x),
                    v: pick(&f.v),
                })
                .collect(),
        };
        let previous = pick(&scene.previous);
        let permuted = ResidualInputs {
            tentative: &state,
            previous: &previous,
            history: &history,
        };
        let dvp = net.velocity_correction(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((dvp[k] - dv[i]).norm() < 1e-14);
        }
    }

    #[test]
    fn history_pads_with_first_frame() {
        let frames: Vec<Kinematics> = (0..2)
            .map(|t| Kinematics {
                x: vec![Vec3::repeat(t as f64)],
                v: vec![Vec3::zeros()],
            })
            .collect();
        let h = KinematicHistory::gather(&frames, 1, 3).unwrap();
        let firsts: Vec<f64> = h.frames.iter().map(|f| f.x[0][0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 0.0]);
        let h = KinematicHistory::gather(&frames, 0, 2).unwrap();
        assert_eq!(h.frames.len(), 2);
        assert!(KinematicHistory::gather(&frames, 2, 3).is_err());
    }

    fn objective(net: &ResidualNet, inputs: &ResidualInputs, seed: &[Vec3]) -> f64 {
        let dv = net.velocity_correction(inputs).unwrap();
        dv.iter().zip(seed).map(|(a, b)| a.dot(b)).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = random_net(small_config(), 11);
        let scene = Scene::new(5, 12);
        let seed: Vec<Vec3> = (0..5)
            .map(|p| Vec3::new(1.0, -0.5 * p as f64, 0.3))
            .collect();
        let mut grad = vec![0.0; net.params.len()];
        let g_in = net.backward(&scene.inputs(), &seed, &mut grad).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..net.params.len() {
            let mut a = net.clone();
            a.params.data[i] += h;
            let mut b = net.clone();
            b.params.data[i] -= h;
            let fd = (objective(&a, &scene.inputs(), &seed)
                - objective(&b, &scene.inputs(), &seed))
                / (2.0 * h);
            let err = (fd - grad[i]).abs() / (fd.abs().max(grad[i].abs()).max(1e-3));
            worst = worst.max(err);
            assert!(err < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
        for p in 0..5 {
            for a in 0..3 {
                for (which, analytic) in [(0, g_in.x[p][a]), (1, g_in.v[p][a])] {
                    let mut sp = scene.state.clone();
                    let mut sm = scene.state.clone();
                    if which == 0 {
                        sp.x[p][a] += h;
                        sm.x[p][a] -= h;
                    } else {
                        sp.v[p][a] += h;
                        sm.v[p][a] -= h;
                    }
                    let ip = ResidualInputs {
                        tentative: &sp,
                        ..scene.inputs()
                    };
                    let im = ResidualInputs {
                        tentative: &sm,
                        ..scene.inputs()
                    };
                    let fd =
                        (objective(&net, &ip, &seed) - objective(&net, &im, &seed)) / (2.0 * h);
                    let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
                    assert!(err < 1e-4, "input {which} p{p} a{a}: fd {fd} vs {analytic}");
                }
            }
        }
        assert!(worst < 1e-4);
    }
}
