//! Smooth squashing of unbounded optimizer variables into physical ranges.

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(s: f64) -> f64 {
    (s / (1.0 - s)).ln()
}

/// Log-space sigmoid bounding: `exp(ln lo + (ln hi - ln lo) σ(raw))`.
/// Requires `0 < lo < hi`.
#[inline]
pub fn bounded_log(raw: f64, lo: f64, hi: f64) -> f64 {
    (lo.ln() + (hi.ln() - lo.ln()) * sigmoid(raw)).exp()
}

/// d bounded_log / d raw.
#[inline]
pub fn bounded_log_grad(raw: f64, lo: f64, hi: f64) -> f64 {
    let s = sigmoid(raw);
    bounded_log(raw, lo, hi) * (hi.ln() - lo.ln()) * s * (1.0 - s)
}

pub fn bounded_log_inverse(value: f64, lo: f64, hi: f64) -> f64 {
    logit((value.ln() - lo.ln()) / (hi.ln() - lo.ln()))
}

/// Linear-space sigmoid bounding: `lo + (hi - lo) σ(raw)`.
#[inline]
pub fn bounded_linear(raw: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * sigmoid(raw)
}

#[inline]
pub fn bounded_linear_grad(raw: f64, lo: f64, hi: f64) -> f64 {
    let s = sigmoid(raw);
    (hi - lo) * s * (1.0 - s)
}

pub fn bounded_linear_inverse(value: f64, lo: f64, hi: f64) -> f64 {
    logit((value - lo) / (hi - lo))
}
