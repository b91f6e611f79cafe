//! GSSM risk level `M` and conflict probability `p`.

use std::f64::consts::{FRAC_1_SQRT_2, LN_10, LN_2};

use serde::{Deserialize, Serialize};

use crate::lognormal::LognormalParams;

/// Survival probabilities are clamped to `[SURVIVAL_EPS, 1 − SURVIVAL_EPS]`.
pub const SURVIVAL_EPS: f64 = 1e-12;

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Clamped survival `S = 1 − Φ(z)` and `ln S`, and whether the clamp was active.
pub fn survival(z: f64) -> (f64, f64, bool) {
    let upper = 0.5 * erfc(z * FRAC_1_SQRT_2);
    if upper < SURVIVAL_EPS {
        return (SURVIVAL_EPS, SURVIVAL_EPS.ln(), true);
    }
    let lower = 0.5 * erfc(-z * FRAC_1_SQRT_2);
    if lower < SURVIVAL_EPS {
        let s = 1.0 - SURVIVAL_EPS;
        return (s, (-SURVIVAL_EPS).ln_1p(), true);
    }
    let ln_s = if upper < 0.5 { upper.ln() } else { (-lower).ln_1p() };
    (upper, ln_s, false)
}

fn level_from_ln_survival(ln_s: f64) -> f64 {
    (-LN_2 / ln_s).log10()
}

/// Largest attainable level; also the sentinel for `s ≤ 0`.
pub fn max_level() -> f64 {
    level_from_ln_survival((-SURVIVAL_EPS).ln_1p())
}

pub fn min_level() -> f64 {
    level_from_ln_survival(SURVIVAL_EPS.ln())
}

/// Risk level as a function of the standardised log-spacing.
pub fn level_from_z(z: f64) -> f64 {
    let (_, ln_s, _) = survival(z);
    level_from_ln_survival(ln_s)
}

/// `dM/dz`; zero where the survival clamp is active.
pub fn level_from_z_derivative(z: f64) -> f64 {
    let (s, ln_s, clamped) = survival(z);
    if clamped {
        0.0
    } else {
        normal_pdf(z) / (s * ln_s * LN_10)
    }
}

/// GSSM level `M = log10(ln 0.5 / ln(1 − F(s)))`.
pub fn gssm_score(s: f64, params: LognormalParams) -> f64 {
    if !(s > 0.0) {
        return max_level();
    }
    level_from_z(params.z(s))
}

/// Conflict probability `p = S(s)^(10^M)`.
pub fn conflict_probability(s: f64, params: LognormalParams, level: f64) -> f64 {
    let ln_s = if s > 0.0 { survival(params.z(s)).1 } else { SURVIVAL_EPS.ln() };
    let p = (10f64.powf(level) * ln_s).exp();
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub time: f64,
    #[serde(rename = "M")]
    pub level: f64,
    pub p: f64,
}

impl RiskPoint {
    /// Point at the observed spacing; `p` is evaluated at its own level.
    pub fn new(time: f64, s: f64, params: LognormalParams) -> Self {
        let level = gssm_score(s, params);
        Self { time, level, p: conflict_probability(s, params, level) }
    }
}
