//! (μ/μ_w, λ) CMA-ES with box repair, used for the two actuator gains.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actuation::DcaGains;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmaConfig {
    pub generations: usize,
    /// Offspring per generation; 0 selects `4 + ⌊3 ln n⌋`.
    pub population: usize,
    /// Initial step size in the search coordinates (log₁₀ units for gains).
    pub sigma0: f64,
    pub seed: u64,
    /// Evaluate offspring on worker threads.
    pub parallel: bool,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            generations: 30,
            population: 0,
            sigma0: 0.5,
            seed: 0,
            parallel: true,
        }
    }
}

impl CmaConfig {
    pub fn population_for(&self, dim: usize) -> usize {
        if self.population > 0 {
            self.population
        } else {
            4 + (3.0 * (dim as f64).ln()).floor() as usize
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Config("CMA-ES sigma0 must be positive".into()));
        }
        if self.population == 1 {
            return Err(Error::Config("CMA-ES needs at least two offspring".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmaOutcome {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Objective at the warm start; infinite if it failed.
    pub warm_value: f64,
    pub evaluations: usize,
    pub failed_evaluations: usize,
    pub generations: usize,
    /// True when no evaluation succeeded and the warm start was returned.
    pub fell_back: bool,
}

fn evaluate_all<F>(objective: &F, points: &[Vec<f64>], parallel: bool) -> Vec<f64>
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    let score = |x: &Vec<f64>| {
        objective(x)
            .filter(|v| v.is_finite())
            .unwrap_or(f64::INFINITY)
    };
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(points.len());
    if !parallel || workers <= 1 {
        return points.iter().map(score).collect();
    }
    let chunk = points.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = points
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(score).collect::<Vec<f64>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("objective panicked"))
            .collect()
    })
}

/// Minimizes `objective` inside the box `bounds` starting from `warm`.
///
/// `objective` returns `None` (or a non-finite value) for failed
/// evaluations. The warm start is evaluated first and is only displaced by
/// a strictly lower value.
pub fn cma_es_minimize<F>(
    objective: F,
    warm: &[f64],
    bounds: &[(f64, f64)],
    cfg: &CmaConfig,
) -> Result<CmaOutcome>
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    cfg.validate()?;
    let n = warm.len();
    if n == 0 || bounds.len() != n || bounds.iter().any(|(lo, hi)| !(lo < hi)) {
        return Err(Error::arg(
            "CMA-ES needs a non-empty box matching the warm start",
        ));
    }
    let clamp = |x: &mut DVector<f64>| {
        for (xi, (lo, hi)) in x.iter_mut().zip(bounds) {
            *xi = xi.clamp(*lo, *hi);
        }
    };
    let nf = n as f64;
    let lambda = cfg.population_for(n);
    let mu = lambda / 2;
    let raw_w: Vec<f64> = (0..mu)
        .map(|i| (mu as f64 + 0.5).ln() - ((i + 1) as f64).ln())
        .collect();
    let w_sum: f64 = raw_w.iter().sum();
    let weights: Vec<f64> = raw_w.iter().map(|w| w / w_sum).collect();
    let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let cc = (4.0 + mueff / nf) / (nf + 4.0 + 2.0 * mueff / nf);
    let cs = (mueff + 2.0) / (nf + mueff + 5.0);
    let c1 = 2.0 / ((nf + 1.3).powi(2) + mueff);
    let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nf + 2.0).powi(2) + mueff));
    let damps = 1.0 + 2.0 * (((mueff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

    let mut mean = DVector::from_column_slice(warm);
    clamp(&mut mean);
    let mut sigma = cfg.sigma0;
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut pc = DVector::<f64>::zeros(n);
    let mut ps = DVector::<f64>::zeros(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let warm_value = evaluate_all(&objective, &[mean.as_slice().to_vec()], false)[0];
    let mut out = CmaOutcome {
        best: mean.as_slice().to_vec(),
        best_value: warm_value,
        warm_value,
        evaluations: 1,
        failed_evaluations: usize::from(!warm_value.is_finite()),
        generations: 0,
        fell_back: false,
    };

    for g in 0..cfg.generations {
        let eig = nalgebra::SymmetricEigen::new(cov.clone());
        let d = eig.eigenvalues.map(|v| v.max(1e-20).sqrt());
        let bd = &eig.eigenvectors * DMatrix::from_diagonal(&d);
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&d.map(|v| 1.0 / v))
            * eig.eigenvectors.transpose();

        let mut steps = Vec::with_capacity(lambda);
        let mut points = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let mut x = &mean + sigma * (&bd * z);
            clamp(&mut x);
            steps.push((&x - &mean) / sigma);
            points.push(x.as_slice().to_vec());
        }
        let values = evaluate_all(&objective, &points, cfg.parallel);
        out.evaluations += lambda;
        out.failed_evaluations += values.iter().filter(|v| !v.is_finite()).count();
        out.generations = g + 1;

        let mut order: Vec<usize> = (0..lambda).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        if values[order[0]] < out.best_value {
            out.best = points[order[0]].clone();
            out.best_value = values[order[0]];
        }
        if !values[order[0]].is_finite() {
            sigma *= 0.5;
            continue;
        }
        let selected = order
            .iter()
            .take(mu)
            .take_while(|&&i| values[i].is_finite())
            .count();
        let wsel = &weights[..selected];
        let wnorm: f64 = wsel.iter().sum();
        let mut y_w = DVector::<f64>::zeros(n);
        for (w, &i) in wsel.iter().zip(&order) {
            y_w += &steps[i] * (w / wnorm);
        }
        mean += sigma * &y_w;
        clamp(&mut mean);

        ps = (1.0 - cs) * &ps + (cs * (2.0 - cs) * mueff).sqrt() * (&inv_sqrt * &y_w);
        let ps_norm = ps.norm();
        let hsig = ps_norm / (1.0 - (1.0 - cs).powi(2 * (g as i32 + 1))).sqrt() / chi_n
            < 1.4 + 2.0 / (nf + 1.0);
        let hs = if hsig { 1.0 } else { 0.0 };
        pc = (1.0 - cc) * &pc + hs * (cc * (2.0 - cc) * mueff).sqrt() * &y_w;
        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (w, &i) in wsel.iter().zip(&order) {
            rank_mu += (w / wnorm) * &steps[i] * steps[i].transpose();
        }
        cov = (1.0 - c1 - cmu) * &cov
            + c1 * (&pc * pc.transpose() + (1.0 - hs) * cc * (2.0 - cc) * &cov)
            + cmu * rank_mu;
        cov = 0.5 * (&cov + cov.transpose());
        sigma *= ((cs / damps) * (ps_norm / chi_n - 1.0)).exp();
        if sigma * d.max() < 1e-12 {
            break;
        }
    }
    if !out.best_value.is_finite() {
        out.fell_back = true;
        out.best = warm.to_vec();
    }
    Ok(out)
}

/// Searchable gain range, log₁₀ units.
pub const LOG_KP_RANGE: (f64, f64) = (0.0, 6.0);
pub const LOG_KD_RANGE: (f64, f64) = (-1.0, 3.0);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainSearch {
    pub gains: DcaGains,
    pub loss: f64,
    pub warm: DcaGains,
    pub warm_loss: f64,
    pub outcome: CmaOutcome,
    pub warning: Option<String>,
}

/// Gain selection in log₁₀ space around the warm-start gains.
pub fn cma_es_gains<F>(objective: F, warm: DcaGains, cfg: &CmaConfig) -> Result<GainSearch>
where
    F: Fn(DcaGains) -> Option<f64> + Sync,
{
    warm.validate()?;
    let to_gains = |x: &[f64]| DcaGains {
        kp: 10f64.powf(x[0]),
        kd: 10f64.powf(x[1]),
    };
    let start = [warm.kp.log10(), warm.kd.log10()];
    let in_box = LOG_KP_RANGE.0 <= start[0]
        && start[0] <= LOG_KP_RANGE.1
        && LOG_KD_RANGE.0 <= start[1]
        && start[1] <= LOG_KD_RANGE.1;
    let objective_at = |x: &[f64]| {
        let exact = x == start.as_slice();
        objective(if exact { warm } else { to_gains(x) })
    };
    let bounds = if in_box {
        [LOG_KP_RANGE, LOG_KD_RANGE]
    } else {
        [
            (LOG_KP_RANGE.0.min(start[0]), LOG_KP_RANGE.1.max(start[0])),
            (LOG_KD_RANGE.0.min(start[1]), LOG_KD_RANGE.1.max(start[1])),
        ]
    };
    let outcome = cma_es_minimize(objective_at, &start, &bounds, cfg)?;
    let warning = outcome
        .fell_back
        .then(|| "every gain candidate diverged; keeping the warm-start gains".to_string());
    if let Some(w) = &warning {
        tracing::warn!("{w}");
    }
    let gains = if outcome.best.as_slice() == start.as_slice() {
        warm
    } else {
        to_gains(&outcome.best)
    };
    Ok(GainSearch {
        gains,
        loss: outcome.best_value,
        warm,
        warm_loss: outcome.warm_value,
        outcome,
        warning,
    })
}
