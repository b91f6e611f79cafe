//! Expected-Gradients attribution of the GSSM level over encoded tokens.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{GssmError, Result};
use crate::model::Model;

pub const DEFAULT_REFERENCES: usize = 32;
pub const DEFAULT_SAMPLES: usize = 200;
pub const IG_STEPS: usize = 512;
pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_ITER: usize = 300;

/// A differentiable scalar of the token matrix `[T, d]` at a spacing `s`.
pub trait LevelFunction {
    fn token_names(&self) -> Vec<String>;
    /// Values and token gradients for a batch of `(θ, s)` pairs.
    fn level_and_grad(&self, thetas: &[Tensor], spacings: &[f64]) -> (Vec<f64>, Vec<Tensor>);
}

impl LevelFunction for Model {
    fn token_names(&self) -> Vec<String> {
        Model::token_names(self)
    }

    fn level_and_grad(&self, thetas: &[Tensor], spacings: &[f64]) -> (Vec<f64>, Vec<Tensor>) {
        Model::level_and_grad(self, thetas, spacings)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub centers: Vec<Tensor>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: &Tensor, centers: &[Tensor]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// k-means over token matrices with farthest-point seeding from a random start.
pub fn reference_centers(reprs: &[Tensor], k: usize, seed: u64) -> Result<ReferenceSet> {
    if k == 0 || k > reprs.len() {
        return Err(GssmError::Argument(format!(
            "need 1 <= k <= {} representations, got k = {k}",
            reprs.len()
        )));
    }
    let shape = reprs[0].dim();
    if reprs.iter().any(|r| r.dim() != shape) {
        return Err(GssmError::Argument("representations differ in shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![reprs[rng.random_range(0..reprs.len())].clone()];
    let mut min_dist: Vec<f64> = reprs.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let mut far = 0;
        for (i, d) in min_dist.iter().enumerate() {
            if *d > min_dist[far] {
                far = i;
            }
        }
        centers.push(reprs[far].clone());
        for (d, r) in min_dist.iter_mut().zip(reprs) {
            *d = d.min(sq_dist(r, &centers[centers.len() - 1]));
        }
    }
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![Tensor::zeros(shape); k];
        let mut counts = vec![0usize; k];
        for r in reprs {
            let c = nearest(r, &centers);
            sums[c] += r;
            counts[c] += 1;
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let updated = &sums[c] / counts[c] as f64;
            shift = shift.max(sq_dist(&updated, &centers[c]).sqrt());
            centers[c] = updated;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    Ok(ReferenceSet { centers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub token_names: Vec<String>,
    pub values: Vec<f64>,
    /// Level at the attributed representation.
    pub level: f64,
    /// Mean level over the references.
    pub baseline: f64,
}

impl AttributionVector {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `Σ attributions − (level − baseline)`.
    pub fn completeness_gap(&self) -> f64 {
        self.total() - (self.level - self.baseline)
    }
}

/// Path points `(reference index, α, weight)` used by the estimator.
///
/// Each reference gets its share of the draws. Its α range is split into strata
/// holding an antithetic pair `(j + u, j + 1 − u)`; an odd share leaves one
/// single-draw stratum at the end.
fn path_draws(k: usize, samples: usize, seed: u64) -> Vec<(usize, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(samples.max(k));
    for r in 0..k {
        let n_r = (samples / k + usize::from(r < samples % k)).max(1);
        let strata = n_r.div_ceil(2);
        let width = 1.0 / strata as f64;
        for j in 0..strata {
            let u: f64 = rng.random();
            let lo = j as f64 * width;
            if 2 * j + 1 < n_r {
                let w = 0.5 * width / k as f64;
                draws.push((r, lo + u * width, w));
                draws.push((r, lo + (1.0 - u) * width, w));
            } else {
                draws.push((r, lo + u * width, width / k as f64));
            }
        }
    }
    draws
}

fn attribute(
    f: &dyn LevelFunction,
    theta: &Tensor,
    s: f64,
    refs: &[Tensor],
    draws: &[(usize, f64, f64)],
) -> Result<AttributionVector> {
    let names = f.token_names();
    let mut points: Vec<Tensor> = draws
        .iter()
        .map(|&(r, alpha, _)| &refs[r] + &((theta - &refs[r]) * alpha))
        .collect();
    points.push(theta.clone());
    points.extend(refs.iter().cloned());
    let spacings = vec![s; points.len()];
    let (levels, grads) = f.level_and_grad(&points, &spacings);
    let mut values = vec![0.0; theta.nrows()];
    for (&(r, _, weight), grad) in draws.iter().zip(&grads) {
        let contrib = (theta - &refs[r]) * grad;
        for (t, row) in contrib.rows().into_iter().enumerate() {
            values[t] += weight * row.sum();
        }
    }
    if let Some(t) = values.iter().position(|v| !v.is_finite()) {
        return Err(GssmError::Attribution {
            token: names.get(t).cloned().unwrap_or_else(|| format!("token_{t}")),
            message: "non-finite gradient along the path".into(),
        });
    }
    let n = draws.len();
    let baseline = levels[n + 1..].iter().sum::<f64>() / refs.len() as f64;
    Ok(AttributionVector { token_names: names, values, level: levels[n], baseline })
}

/// Expected-Gradients estimate with `samples` (reference, α) draws.
///
/// Draws are stratified: each reference receives an equal share of the
/// samples (at least one) with α in antithetic pairs on a regular grid.
pub fn expected_gradients(
    f: &dyn LevelFunction,
    theta: &Tensor,
    s: f64,
    refs: &ReferenceSet,
    samples: usize,
    seed: u64,
) -> Result<AttributionVector> {
    if samples == 0 {
        return Err(GssmError::Argument("at least one EG sample is required".into()));
    }
    if refs.is_empty() {
        return Err(GssmError::Argument("empty reference set".into()));
    }
    attribute(f, theta, s, &refs.centers, &path_draws(refs.len(), samples, seed))
}

/// Integrated gradients against a single reference on a midpoint grid.
pub fn integrated_gradients(
    f: &dyn LevelFunction,
    theta: &Tensor,
    s: f64,
    reference: &Tensor,
    steps: usize,
) -> Result<AttributionVector> {
    if steps == 0 {
        return Err(GssmError::Argument("at least one integration step is required".into()));
    }
    let draws: Vec<_> = (0..steps).map(|j| (0, (j as f64 + 0.5) / steps as f64, 1.0 / steps as f64)).collect();
    attribute(f, theta, s, std::slice::from_ref(reference), &draws)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    Safe,
    Danger,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorCount {
    pub token: String,
    pub count: usize,
}

/// Indices of the leading factors of one step: largest positive values in
/// safe periods, most negative values in danger periods; ties by index.
pub fn top_indices(values: &[f64], period: Period, n_top: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len())
        .filter(|&i| match period {
            Period::Safe => values[i] > 0.0,
            Period::Danger => values[i] < 0.0,
        })
        .collect();
    match period {
        Period::Safe => idx.sort_by(|&a, &b| values[b].total_cmp(&values[a])),
        Period::Danger => idx.sort_by(|&a, &b| values[a].total_cmp(&values[b])),
    }
    idx.truncate(n_top);
    idx
}

/// How often each token is among the leading `n_top` factors over a series.
pub fn top_factors(series: &[AttributionVector], period: Period, n_top: usize) -> Result<Vec<FactorCount>> {
    let Some(first) = series.first() else {
        return Err(GssmError::Argument("empty attribution series".into()));
    };
    let mut counts = vec![0usize; first.token_names.len()];
    for v in series {
        for i in top_indices(&v.values, period, n_top) {
            if let Some(c) = counts.get_mut(i) {
                *c += 1;
            }
        }
    }
    Ok(first
        .token_names
        .iter()
        .zip(counts)
        .map(|(token, count)| FactorCount { token: token.clone(), count })
        .collect())
}

/// One attributed sample for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub event_id: String,
    pub time: f64,
    pub attribution: AttributionVector,
}

/// Writes `event_id,time,token_name,attribution` rows.
pub fn write_attribution_csv(path: &Path, records: &[AttributionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["event_id", "time", "token_name", "attribution"])?;
    for r in records {
        for (name, v) in r.attribution.token_names.iter().zip(&r.attribution.values) {
            w.write_record([r.event_id.clone(), r.time.to_string(), name.clone(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Factor counts keyed by condition label and period.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub conditions: BTreeMap<String, BTreeMap<String, Vec<FactorCount>>>,
}

impl FactorSummary {
    pub fn insert(&mut self, condition: &str, period: Period, counts: Vec<FactorCount>) {
        let key = match period {
            Period::Safe => "safe",
            Period::Danger => "danger",
        };
        self.conditions.entry(condition.to_owned()).or_default().insert(key.to_owned(), counts);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
