//! Per-sample training weights from the cosine distribution.
//!
//! Three strategies are fused by coefficients that depend on `delta_r`, the
//! right endpoint of the distribution, which tracks training progress:
//! equal weights first, then weights increasing in `cos θ`, and finally a
//! Gaussian bump around the clean mode `mu_r` that emphasizes semi-hard clean
//! samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histogram::{HistStats, DEFAULT_ZETA};

/// Where the sample weight enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMethod {
    /// Multiplies the per-sample loss term.
    LossScale,
    /// Multiplies the logit scale `s` of the sample's row.
    LogitScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightPolicy {
    pub lambda: f64,
    pub zeta: f64,
    pub sigma_divisor: f64,
    pub method: WeightMethod,
    pub eps: f64,
}

impl Default for WeightPolicy {
    fn default() -> Self {
        WeightPolicy {
            lambda: 10.0,
            zeta: DEFAULT_ZETA,
            sigma_divisor: 2.576,
            method: WeightMethod::LogitScale,
            eps: 1e-6,
        }
    }
}

impl WeightPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("weight policy: {what}")));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return bad("zeta must lie in (0, 1)");
        }
        if !(self.sigma_divisor > 0.0 && self.sigma_divisor.is_finite()) {
            return bad("sigma_divisor must be positive");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Strategy one: every sample counts the same.
pub fn w1(_cos_theta: f64) -> f64 {
    1.0
}

/// Strategy two: softplus ramp from the left peak to the right endpoint.
///
/// Falls back to `delta_l` as the anchor when no left peak was found. The
/// result never underflows to zero.
pub fn w2(cos_theta: f64, st: &HistStats, pol: &WeightPolicy) -> f64 {
    let anchor = st.mu_l.unwrap_or(st.delta_l);
    let z = (cos_theta - anchor) / (st.delta_r - anchor).max(pol.eps);
    (softplus(pol.lambda * z) / softplus(pol.lambda)).max(f64::MIN_POSITIVE)
}

/// Strategy three: Gaussian around `mu_r` whose width puts `delta_r` at the
/// 99% coverage point. `None` when the right peak is missing.
pub fn w3(cos_theta: f64, st: &HistStats, pol: &WeightPolicy) -> Option<f64> {
    let mu_r = st.mu_r?;
    let sigma = ((st.delta_r - mu_r) / pol.sigma_divisor).max(pol.eps);
    let d = cos_theta - mu_r;
    Some((-(d * d) / (2.0 * sigma * sigma)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// `alpha(d) = (2 - 1/(1+e^(5-20d)) - 1/(1+e^(20d-15))) * ceil(0.5 - d)`,
/// with the ceiling gate equal to 1 only for `d < 0.5`.
pub fn alpha(delta_r: f64) -> f64 {
    if delta_r < 0.5 {
        2.0 - logistic(20.0 * delta_r - 5.0) - logistic(15.0 - 20.0 * delta_r)
    } else {
        0.0
    }
}

impl FusionCoeffs {
    /// Coefficients at `delta_r`, which is clamped to `[0, 1]` first.
    pub fn at(delta_r: f64) -> Self {
        let d = delta_r.clamp(0.0, 1.0);
        let alpha = alpha(d);
        let gamma = self::alpha(1.0 - d);
        FusionCoeffs {
            alpha,
            beta: 1.0 - alpha - gamma,
            gamma,
        }
    }
}

pub fn fusion_coeffs(delta_r: f64) -> FusionCoeffs {
    FusionCoeffs::at(delta_r)
}

/// Fused weight `alpha*w1 + beta*w2 + gamma*w3`.
///
/// Without a right peak the strategy-three share moves to strategy two.
pub fn sample_weight(cos_theta: f64, st: &HistStats, pol: &WeightPolicy) -> f64 {
    let c = FusionCoeffs::at(st.delta_r);
    let ramp = w2(cos_theta, st, pol);
    match w3(cos_theta, st, pol) {
        Some(bump) => c.alpha * w1(cos_theta) + c.beta * ramp + c.gamma * bump,
        None => c.alpha * w1(cos_theta) + (c.beta + c.gamma) * ramp,
    }
}

/// One line of the per-batch weighting diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub iter: usize,
    pub delta_r: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mean_weight: f64,
    pub min_weight: f64,
    pub max_weight: f64,
}

impl WeightRecord {
    pub fn summarize(iter: usize, delta_r: f64, weights: &[f64]) -> Self {
        let c = FusionCoeffs::at(delta_r);
        let n = weights.len().max(1) as f64;
        WeightRecord {
            iter,
            delta_r,
            alpha: c.alpha,
            beta: c.beta,
            gamma: c.gamma,
            mean_weight: weights.iter().sum::<f64>() / n,
            min_weight: weights.iter().copied().fold(f64::INFINITY, f64::min),
            max_weight: weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}
