//! Lognormal spacing distribution: likelihood, divergence and quadrature.

use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{GssmError, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Gauss–Legendre order used for the Jensen–Shannon divergence.
pub const JS_NODES: usize = 64;
/// Half-width of the integration window, in mixture standard deviations.
pub const JS_HALF_WIDTH: f64 = 8.0;

/// Conditional parameters of ln S: mean `mu` and log-variance `log_var`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalParams {
    pub mu: f64,
    pub log_var: f64,
}

impl LognormalParams {
    pub fn new(mu: f64, log_var: f64) -> Self {
        Self { mu, log_var }
    }

    pub fn clamped_log_var(&self) -> f64 {
        self.log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
    }

    pub fn variance(&self) -> f64 {
        self.clamped_log_var().exp()
    }

    pub fn sigma(&self) -> f64 {
        (0.5 * self.clamped_log_var()).exp()
    }

    pub fn median(&self) -> f64 {
        self.mu.exp()
    }

    /// Standardised log-spacing `(ln s − μ)/σ`.
    pub fn z(&self, s: f64) -> f64 {
        (s.ln() - self.mu) / self.sigma()
    }

    pub fn density(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let var = self.variance();
        let r = s.ln() - self.mu;
        (-(r * r) / (2.0 * var)).exp() / (s * (2.0 * PI * var).sqrt())
    }

    pub fn cdf(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        crate::score::normal_cdf(self.z(s))
    }
}

/// Negative log-likelihood of spacing `s` under the lognormal.
pub fn nll_loss(params: LognormalParams, s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(GssmError::Domain(format!("spacing must be positive, got {s}")));
    }
    let lv = params.clamped_log_var();
    let r = s.ln() - params.mu;
    Ok(0.5 * ((2.0 * PI).ln() + lv + r * r / lv.exp()) + s.ln())
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Cached 64-point rule used by the divergence.
pub fn js_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(JS_NODES))
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_normal_pdf(x: f64, mu: f64, log_var: f64) -> f64 {
    let r = x - mu;
    -0.5 * ((2.0 * PI).ln() + log_var + r * r / log_var.exp())
}

/// Integration window `(centre, half_width)` in log-space for the pair.
pub fn js_window(p: LognormalParams, q: LognormalParams) -> (f64, f64) {
    let c = 0.5 * (p.mu + q.mu);
    let d = 0.5 * (p.mu - q.mu);
    let var = 0.5 * (p.variance() + q.variance()) + d * d;
    (c, JS_HALF_WIDTH * var.sqrt())
}

/// Jensen–Shannon divergence (nats) between two lognormals.
///
/// The divergence is invariant under the bijection `x = ln s`, so it is
/// evaluated between the corresponding normals.
pub fn js_divergence_lognormal(p: LognormalParams, q: LognormalParams) -> f64 {
    let (nodes, weights) = js_rule();
    let (c, h) = js_window(p, q);
    let (lv_p, lv_q) = (p.clamped_log_var(), q.clamped_log_var());
    let mut total = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        let t = c + h * x;
        let lp = log_normal_pdf(t, p.mu, lv_p);
        let lq = log_normal_pdf(t, q.mu, lv_q);
        let term = lp.exp() * (LN_2 - softplus(lq - lp)) + lq.exp() * (LN_2 - softplus(lp - lq));
        total += w * term;
    }
    (0.5 * h * total).clamp(0.0, LN_2)
}
