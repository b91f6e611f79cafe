//! Evaluation protocol for risk quantification on safety-critical events.
//!
//! Each event contributes one positive (the voted conflicting object in the
//! danger period) and any number of negatives (safe windows of the other
//! objects). Thresholds turn risk series into alerts; counts over all events
//! give the ROC, PRC and accuracy-timeliness curves and the summary metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Event;
use crate::error::{GssmError, Result};

pub const DANGER_LEAD: f64 = 4.5;
pub const DANGER_TAIL: f64 = 0.5;
pub const SAFE_OFFSET: f64 = 1.5;
pub const SAFE_MIN: f64 = 2.0;
pub const SAFE_MAX: f64 = 5.0;
pub const SAFE_BEFORE_START: f64 = 3.0;
pub const HARD_BRAKING: f64 = 1.5;
pub const MIN_DETECTION: f64 = 5.0;
pub const TTI_CAP: f64 = 10.0;
pub const TTI_EARLY: f64 = 1.5;

const TIME_EPS: f64 = 1e-9;

/// Evaluation windows of one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSpec {
    pub event_id: String,
    pub impact_time: f64,
    pub danger: (f64, f64),
    /// Objects detected for at least [`MIN_DETECTION`] seconds.
    pub candidates: Vec<String>,
    /// Safe window per qualifying object.
    pub safe: BTreeMap<String, (f64, f64)>,
}

/// Danger and safe periods of an annotated event.
pub fn build_periods(event: &Event) -> Result<PeriodSpec> {
    let ann = &event.annotations;
    let impact = ann
        .impact_time
        .ok_or_else(|| GssmError::Evaluation(format!("event {}: impact time missing", event.event_id)))?;
    let start = ann.start_time.map_or(impact - DANGER_LEAD, |s| s.min(impact - DANGER_LEAD));
    let end = ann.end_time.map_or(impact + DANGER_TAIL, |e| e.min(impact + DANGER_TAIL));
    let mut candidates = Vec::new();
    let mut safe = BTreeMap::new();
    for track in event.objects() {
        let (Some(first), Some(last)) = (track.start_time(), track.end_time()) else { continue };
        if last - first < MIN_DETECTION - TIME_EPS {
            continue;
        }
        candidates.push(track.agent_id.clone());
        let lo = first + SAFE_OFFSET;
        let hi = (first + SAFE_OFFSET + SAFE_MAX).min(start - SAFE_BEFORE_START).min(last);
        if hi - lo < SAFE_MIN - TIME_EPS {
            continue;
        }
        let braking = track.frames.windows(2).any(|w| {
            w[0].time >= lo - TIME_EPS
                && w[1].time <= hi + TIME_EPS
                && (w[0].speed - w[1].speed) / (w[1].time - w[0].time) > HARD_BRAKING
        });
        if !braking {
            safe.insert(track.agent_id.clone(), (lo, hi));
        }
    }
    Ok(PeriodSpec { event_id: event.event_id.clone(), impact_time: impact, danger: (start, end), candidates, safe })
}

/// Risk values of one scorer for one object, on increasing times.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl RiskSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        Self { times, values }
    }

    /// Values at times within `[lo, hi]`.
    pub fn window(&self, lo: f64, hi: f64) -> Vec<f64> {
        self.times
            .iter()
            .zip(&self.values)
            .filter(|(t, _)| **t >= lo - TIME_EPS && **t <= hi + TIME_EPS)
            .map(|(_, v)| *v)
            .collect()
    }

    /// Values strictly before `t`.
    pub fn before(&self, t: f64) -> Vec<f64> {
        self.times.iter().zip(&self.values).filter(|(s, _)| **s < t - TIME_EPS).map(|(_, v)| *v).collect()
    }

    /// Prefix of the series up to and including `t`.
    pub fn until(&self, t: f64) -> RiskSeries {
        let n = self.times.iter().take_while(|s| **s <= t + TIME_EPS).count();
        RiskSeries { times: self.times[..n].to_vec(), values: self.values[..n].to_vec() }
    }
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Temporary conflicting object chosen by one scorer, or `None` to abstain.
pub fn stage_one(periods: &PeriodSpec, series: &BTreeMap<String, RiskSeries>) -> Option<String> {
    let (d0, d1) = periods.danger;
    let mut best: Option<(&String, f64)> = None;
    for id in &periods.candidates {
        let Some(s) = series.get(id) else { continue };
        let danger = s.window(d0, d1);
        if danger.is_empty() {
            continue;
        }
        let mean = danger.iter().sum::<f64>() / danger.len() as f64;
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((id, mean));
        }
    }
    let (id, _) = best?;
    let s = &series[id];
    let pre = sorted(s.before(d0));
    if pre.is_empty() {
        return None;
    }
    let danger = sorted(s.window(d0, d1));
    [0.25, 0.5, 0.75]
        .iter()
        .all(|&q| percentile(&pre, q) < percentile(&danger, q))
        .then(|| id.clone())
}

/// Winner of the vote: more than a third of all votes for it and fewer than
/// a third for other objects. Abstentions (`None`) count towards the total
/// when `count_abstentions` is set.
pub fn vote(votes: &[Option<String>], count_abstentions: bool) -> Option<String> {
    let mut tally: BTreeMap<&String, usize> = BTreeMap::new();
    for v in votes.iter().flatten() {
        *tally.entry(v).or_default() += 1;
    }
    let cast: usize = tally.values().sum();
    let total = if count_abstentions { votes.len() } else { cast };
    let (winner, &count) = tally.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))?;
    let against = cast - count;
    (3 * count > total && 3 * against < total).then(|| (*winner).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Alert steps (0.1 s each) required for a true positive.
    pub min_alert_steps: usize,
    /// Count alert steps cumulatively rather than requiring a contiguous run.
    pub cumulative_alert: bool,
    pub count_abstentions: bool,
    pub max_thresholds: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { min_alert_steps: 5, cumulative_alert: true, count_abstentions: true, max_thresholds: 512 }
    }
}

/// Largest threshold for which the series still raises a qualifying alert
/// (alerts need `risk > threshold`); `-∞` if it never can.
pub fn alert_critical(values: &[f64], min_steps: usize, cumulative: bool) -> f64 {
    let k = min_steps.max(1);
    if values.len() < k {
        return f64::NEG_INFINITY;
    }
    if cumulative {
        let s = sorted(values.to_vec());
        return s[s.len() - k];
    }
    values
        .windows(k)
        .map(|w| w.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fps: usize,
    pub tns: usize,
}

impl ConfusionCounts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fps == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fps) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn r_fn(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.fn_ as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn r_fp(&self) -> f64 {
        if self.fps + self.tns == 0 {
            0.0
        } else {
            self.fps as f64 / (self.fps + self.tns) as f64
        }
    }
}

/// Conflicting-object risk of one event under one scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositiveItem {
    pub event_id: String,
    pub impact_time: f64,
    pub critical: f64,
    /// Series up to impact, used for the time to impact.
    pub series: RiskSeries,
}

/// Safe window of a non-conflicting object under one scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeItem {
    pub event_id: String,
    pub object_id: String,
    pub critical: f64,
}

pub fn confusion_counts(positives: &[PositiveItem], negatives: &[NegativeItem], threshold: f64) -> ConfusionCounts {
    let tp = positives.iter().filter(|p| p.critical > threshold).count();
    let fps = negatives.iter().filter(|n| n.critical > threshold).count();
    ConfusionCounts { tp, fn_: positives.len() - tp, fps, tns: negatives.len() - fps }
}

/// Time from the last upward threshold crossing at or before impact until
/// impact. A series starting above the threshold crosses at its first step.
pub fn tti(series: &RiskSeries, threshold: f64, impact_time: f64) -> Option<f64> {
    let mut last = None;
    let mut prev_below = true;
    for (&t, &v) in series.times.iter().zip(&series.values) {
        if t > impact_time + TIME_EPS {
            break;
        }
        let above = v > threshold;
        if above && prev_below {
            last = Some(t);
        }
        prev_below = !above;
    }
    last.map(|t| impact_time - t)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `P(B ≤ m)` for `B ~ Binomial(n, 1/2)`.
pub fn binomial_half_cdf(m: u64, n: u64) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    (0..=m.min(n)).map(|i| (ln_choose(n, i) - n as f64 * ln2).exp()).sum::<f64>().min(1.0)
}

/// Distribution-free confidence interval for the median from order
/// statistics `[x_(k), x_(n−k+1)]`; `None` when the sample is too small.
pub fn sign_test_ci(sorted: &[f64], level: f64) -> Option<(f64, f64)> {
    let n = sorted.len() as u64;
    let alpha = 1.0 - level;
    let mut k = 0;
    for cand in 1..=n.div_ceil(2) {
        if 2.0 * binomial_half_cdf(cand - 1, n) <= alpha {
            k = cand;
        } else {
            break;
        }
    }
    (k >= 1).then(|| (sorted[(k - 1) as usize], sorted[(n - k) as usize]))
}

/// Summary of time-to-impact values of detected events at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtiStats {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub ci99: Option<(f64, f64)>,
    pub p_ge_1_5: f64,
}

/// Statistics over `ttis`; the median and quartiles use values below 10 s.
pub fn tti_stats(ttis: &[f64]) -> Option<TtiStats> {
    if ttis.is_empty() {
        return None;
    }
    let p_ge = ttis.iter().filter(|t| **t >= TTI_EARLY).count() as f64 / ttis.len() as f64;
    let capped = sorted(ttis.iter().copied().filter(|t| *t < TTI_CAP).collect());
    if capped.is_empty() {
        return None;
    }
    Some(TtiStats {
        count: capped.len(),
        median: percentile(&capped, 0.5),
        q1: percentile(&capped, 0.25),
        q3: percentile(&capped, 0.75),
        ci99: sign_test_ci(&capped, 0.99),
        p_ge_1_5: p_ge,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub r_fp: f64,
    pub r_fn: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(rename = "mTTI")]
    pub mtti: Option<f64>,
    #[serde(rename = "P_tti_ge_1_5")]
    pub p_tti_ge_1_5: Option<f64>,
}

/// Thresholds at which the counts change, plus `-∞`; subsampled to at most
/// `max` values by quantiles.
pub fn threshold_grid(positives: &[PositiveItem], negatives: &[NegativeItem], max: usize) -> Vec<f64> {
    let mut crit: Vec<f64> = positives
        .iter()
        .map(|p| p.critical)
        .chain(negatives.iter().map(|n| n.critical))
        .filter(|c| c.is_finite())
        .collect();
    crit.sort_by(f64::total_cmp);
    crit.dedup();
    let room = max.max(2) - 1;
    if crit.len() > room {
        let m = crit.len();
        let mut picked: Vec<f64> =
            (0..room).map(|i| crit[((i as f64) * (m - 1) as f64 / (room - 1) as f64).round() as usize]).collect();
        picked.dedup();
        crit = picked;
    }
    let mut grid = vec![f64::NEG_INFINITY];
    grid.extend(crit);
    grid
}

/// Curve point at every threshold of the grid (ascending thresholds).
pub fn curve(positives: &[PositiveItem], negatives: &[NegativeItem], thresholds: &[f64]) -> Vec<CurvePoint> {
    thresholds
        .iter()
        .map(|&th| {
            let c = confusion_counts(positives, negatives, th);
            let ttis: Vec<f64> = positives
                .iter()
                .filter(|p| p.critical > th)
                .filter_map(|p| tti(&p.series, th, p.impact_time))
                .collect();
            let stats = tti_stats(&ttis);
            CurvePoint {
                threshold: th,
                r_fp: c.r_fp(),
                r_fn: c.r_fn(),
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                mtti: stats.as_ref().map(|s| s.median),
                p_tti_ge_1_5: stats.as_ref().map(|s| s.p_ge_1_5),
            }
        })
        .collect()
}

/// Trapezoidal area under the precision-recall points.
pub fn auprc(points: &[CurvePoint]) -> f64 {
    let mut pr: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pr.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pr.windows(2).map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1)).sum()
}

/// Normalised area under the ROC curve restricted to true-positive rates in `[r, 1]`.
pub fn a_roc(points: &[CurvePoint], r: f64) -> f64 {
    let mut roc: Vec<(f64, f64)> = points.iter().map(|p| (1.0 - p.r_fn, p.r_fp)).collect();
    roc.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    for w in roc.windows(2) {
        let ((t0, f0), (t1, f1)) = (w[0], w[1]);
        if t1 <= t0 || t1 <= r {
            continue;
        }
        let a = t0.max(r);
        let fa = f0 + (f1 - f0) * (a - t0) / (t1 - t0);
        area += (t1 - a) * (1.0 - 0.5 * (fa + f1));
    }
    area / (1.0 - r)
}

/// Highest precision among points with recall at least `r`.
pub fn precision_at_recall(points: &[CurvePoint], r: f64) -> Option<f64> {
    points.iter().filter(|p| p.recall >= r).map(|p| p.precision).fold(None, |m, p| Some(m.map_or(p, |m: f64| m.max(p))))
}

/// Index of the first point (ascending thresholds) with the highest F1.
pub fn best_f1_index(points: &[CurvePoint]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in points.iter().enumerate() {
        if best.is_none_or(|b| p.f1 > points[b].f1) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub n_positives: usize,
    pub n_negatives: usize,
    pub auprc: f64,
    pub a_roc_80: f64,
    pub a_roc_90: f64,
    pub precision_prc_80: Option<f64>,
    pub precision_prc_90: Option<f64>,
    pub max_f1: f64,
    /// `None` when the best threshold is `-∞`.
    pub best_threshold: Option<f64>,
    pub counts_at_best: ConfusionCounts,
    pub mtti_star: Option<f64>,
    pub p_tti_ge_1_5_star: Option<f64>,
    pub tti_at_best: Option<TtiStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerEvaluation {
    pub report: EvalReport,
    pub curve: Vec<CurvePoint>,
}

pub fn curves_and_metrics(
    scorer: &str,
    positives: &[PositiveItem],
    negatives: &[NegativeItem],
    opts: &EvalOptions,
) -> Result<ScorerEvaluation> {
    if positives.is_empty() {
        return Err(GssmError::Evaluation(format!("scorer {scorer}: no scored events")));
    }
    let grid = threshold_grid(positives, negatives, opts.max_thresholds);
    let points = curve(positives, negatives, &grid);
    let best = best_f1_index(&points).expect("grid is nonempty");
    let th = points[best].threshold;
    let ttis: Vec<f64> = positives
        .iter()
        .filter(|p| p.critical > th)
        .filter_map(|p| tti(&p.series, th, p.impact_time))
        .collect();
    let report = EvalReport {
        scorer: scorer.to_owned(),
        n_positives: positives.len(),
        n_negatives: negatives.len(),
        auprc: auprc(&points),
        a_roc_80: a_roc(&points, 0.8),
        a_roc_90: a_roc(&points, 0.9),
        precision_prc_80: precision_at_recall(&points, 0.8),
        precision_prc_90: precision_at_recall(&points, 0.9),
        max_f1: points[best].f1,
        best_threshold: th.is_finite().then_some(th),
        counts_at_best: confusion_counts(positives, negatives, th),
        mtti_star: points[best].mtti,
        p_tti_ge_1_5_star: points[best].p_tti_ge_1_5,
        tti_at_best: tti_stats(&ttis),
    };
    Ok(ScorerEvaluation { report, curve: points })
}

/// Periods and per-scorer, per-object risk series of one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventScores {
    pub periods: PeriodSpec,
    pub risks: BTreeMap<String, BTreeMap<String, RiskSeries>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutcome {
    /// Voted conflicting object per event.
    pub conflicting: BTreeMap<String, Option<String>>,
    pub scorers: BTreeMap<String, ScorerEvaluation>,
}

/// Runs the three-stage protocol over all events for every scorer.
pub fn evaluate(events: &[EventScores], opts: &EvalOptions) -> Result<EvaluationOutcome> {
    let mut conflicting = BTreeMap::new();
    let mut items: BTreeMap<String, (Vec<PositiveItem>, Vec<NegativeItem>)> = BTreeMap::new();
    for ev in events {
        let votes: Vec<Option<String>> = ev.risks.values().map(|s| stage_one(&ev.periods, s)).collect();
        let winner = vote(&votes, opts.count_abstentions);
        conflicting.insert(ev.periods.event_id.clone(), winner.clone());
        let Some(target) = winner else { continue };
        let (d0, d1) = ev.periods.danger;
        for (scorer, series) in &ev.risks {
            let entry = items.entry(scorer.clone()).or_default();
            let s = series.get(&target).cloned().unwrap_or_default();
            entry.0.push(PositiveItem {
                event_id: ev.periods.event_id.clone(),
                impact_time: ev.periods.impact_time,
                critical: alert_critical(&s.window(d0, d1), opts.min_alert_steps, opts.cumulative_alert),
                series: s.until(ev.periods.impact_time),
            });
            for (object, &(lo, hi)) in &ev.periods.safe {
                if *object == target {
                    continue;
                }
                let Some(values) = series.get(object).map(|s| s.window(lo, hi)) else { continue };
                if values.is_empty() {
                    continue;
                }
                entry.1.push(NegativeItem {
                    event_id: ev.periods.event_id.clone(),
                    object_id: object.clone(),
                    critical: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
        }
    }
    if items.is_empty() {
        return Err(GssmError::Evaluation("no event has a voted conflicting object".into()));
    }
    let scorers = items
        .iter()
        .map(|(name, (pos, neg))| Ok((name.clone(), curves_and_metrics(name, pos, neg, opts)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvaluationOutcome { conflicting, scorers })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const CURVE_HEADER: [&str; 9] = ["scorer", "threshold", "r_fp", "r_fn", "precision", "recall", "f1", "mTTI", "P_tti_ge_1_5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Roc,
    Prc,
    Atc,
}

impl CurveKind {
    pub const ALL: [CurveKind; 3] = [CurveKind::Roc, CurveKind::Prc, CurveKind::Atc];

    pub fn file_stem(self) -> &'static str {
        match self {
            CurveKind::Roc => "roc",
            CurveKind::Prc => "prc",
            CurveKind::Atc => "atc",
        }
    }

    /// `(x, y)` coordinates of a point on this curve.
    pub fn coords(self, p: &CurvePoint) -> Option<(f64, f64)> {
        match self {
            CurveKind::Roc => Some((p.r_fp, 1.0 - p.r_fn)),
            CurveKind::Prc => Some((p.recall, p.precision)),
            CurveKind::Atc => p.mtti.map(|m| (m, p.f1)),
        }
    }

    fn labels(self) -> (&'static str, &'static str, (f64, f64)) {
        match self {
            CurveKind::Roc => ("False positive rate", "True positive rate", (0.0, 1.0)),
            CurveKind::Prc => ("Recall", "Precision", (0.0, 1.0)),
            CurveKind::Atc => ("mTTI (s)", "F1", (0.0, TTI_CAP)),
        }
    }
}

/// Writes one curve CSV with all scorers, points ordered along the curve.
pub fn write_curve_csv(path: &Path, kind: CurveKind, scorers: &BTreeMap<String, ScorerEvaluation>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CURVE_HEADER)?;
    for (name, eval) in scorers {
        let mut pts: Vec<&CurvePoint> = eval.curve.iter().filter(|p| kind.coords(p).is_some()).collect();
        pts.sort_by(|a, b| {
            let (xa, ya) = kind.coords(a).unwrap();
            let (xb, yb) = kind.coords(b).unwrap();
            xa.total_cmp(&xb).then(ya.total_cmp(&yb))
        });
        for p in pts {
            w.write_record([
                name.clone(),
                p.threshold.to_string(),
                p.r_fp.to_string(),
                p.r_fn.to_string(),
                p.precision.to_string(),
                p.recall.to_string(),
                p.f1.to_string(),
                fmt_opt(p.mtti),
                fmt_opt(p.p_tti_ge_1_5),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a curve CSV back into `(scorer, point)` rows.
pub fn read_curve_csv(path: &Path) -> Result<Vec<(String, CurvePoint)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(CURVE_HEADER) {
        return Err(GssmError::Schema(format!("{}: unexpected curve header", path.display())));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| GssmError::Schema(format!("{}: bad number {s:?}", path.display())))
    };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { parse(s).map(Some) } };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push((
            rec[0].to_owned(),
            CurvePoint {
                threshold: parse(&rec[1])?,
                r_fp: parse(&rec[2])?,
                r_fn: parse(&rec[3])?,
                precision: parse(&rec[4])?,
                recall: parse(&rec[5])?,
                f1: parse(&rec[6])?,
                mtti: opt(&rec[7])?,
                p_tti_ge_1_5: opt(&rec[8])?,
            },
        ));
    }
    Ok(out)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Static SVG line plot of one curve kind for several scorers.
pub fn render_svg(kind: CurveKind, rows: &[(String, CurvePoint)]) -> String {
    let (w, h, m) = (480.0, 400.0, 56.0);
    let (xl, yl, (x0, x1)) = kind.labels();
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 1.5 * m);
    let sy = |y: f64| h - m - y * (h - 1.5 * m);
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (name, p) in rows {
        if let Some(c) = kind.coords(p) {
            groups.entry(name.as_str()).or_default().push(c);
        }
    }
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{m}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        0.5 * m,
        w - 1.5 * m,
        h - 1.5 * m
    );
    for k in 0..=5 {
        let f = k as f64 / 5.0;
        let xv = x0 + f * (x1 - x0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), h - m + 16.0, xv);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, m - 6.0, sy(f) + 4.0, f);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xl}</text>"#, m + 0.5 * (w - 1.5 * m), h - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{yl}</text>"#,
        0.5 * h,
        0.5 * h
    );
    for (i, (name, mut pts)) in groups.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = 0.5 * m + 16.0 + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{ly:.1}" fill="{colour}">{name}</text>"#, w - 1.0 * m - 60.0);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `report.json` and the three curve CSVs.
pub fn write_outputs(dir: &Path, outcome: &EvaluationOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct Report<'a> {
        conflicting: &'a BTreeMap<String, Option<String>>,
        metrics: BTreeMap<&'a str, &'a EvalReport>,
    }
    let report = Report {
        conflicting: &outcome.conflicting,
        metrics: outcome.scorers.iter().map(|(k, v)| (k.as_str(), &v.report)).collect(),
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    for kind in CurveKind::ALL {
        write_curve_csv(&dir.join(format!("{}.csv", kind.file_stem())), kind, &outcome.scorers)?;
    }
    Ok(())
}

/// Renders `roc.svg`, `prc.svg` and `atc.svg` in `out` from the curve CSVs in `input`.
pub fn render_curves(input: &Path, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    for kind in CurveKind::ALL {
        let rows = read_curve_csv(&input.join(format!("{}.csv", kind.file_stem())))?;
        fs::write(out.join(format!("{}.svg", kind.file_stem())), render_svg(kind, &rows))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AgentTrack, EnvironmentTags, EventAnnotations, EventType, Role, Severity, TrajectoryFrame};
    use num_bigint::BigUint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn track(id: &str, role: Role, t0: f64, t1: f64, speed: impl Fn(f64) -> f64) -> AgentTrack {
        let n = ((t1 - t0) / 0.1).round() as usize;
        let frames = (0..=n)
            .map(|k| {
                let t = t0 + 0.1 * k as f64;
                TrajectoryFrame { time: t, x: 0.0, y: 0.0, heading: 0.0, speed: speed(t), yaw_rate: 0.0, accel: None }
            })
            .collect();
        AgentTrack { agent_id: id.into(), role, length: 4.5, width: 1.8, frames }
    }

    fn event(start: Option<f64>, impact: Option<f64>, end: Option<f64>, objects: Vec<AgentTrack>) -> Event {
        let mut tracks = vec![track("ego", Role::Subject, 0.0, 30.0, |_| 10.0)];
        tracks.extend(objects);
        Event {
            event_id: "e".into(),
            severity: Severity::Crash,
            tracks,
            environment: EnvironmentTags::default(),
            annotations: EventAnnotations {
                start_time: start,
                impact_time: impact,
                end_time: end,
                reaction_time: None,
                event_type: EventType::Other,
            },
        }
    }

    #[test]
    fn danger_period_bounds() {
        let e = event(Some(18.0), Some(20.0), Some(22.0), vec![]);
        let p = build_periods(&e).unwrap();
        assert!((p.danger.0 - 15.5).abs() < 1e-12);
        assert!((p.danger.1 - 20.5).abs() < 1e-12);
        let e = event(Some(10.0), Some(20.0), Some(20.2), vec![]);
        let p = build_periods(&e).unwrap();
        assert_eq!(p.danger, (10.0, 20.2));
        let e = event(None, Some(20.0), None, vec![]);
        assert_eq!(build_periods(&e).unwrap().danger, (15.5, 20.5));
        let e = event(None, None, None, vec![]);
        assert!(matches!(build_periods(&e), Err(GssmError::Evaluation(_))));
    }

    #[test]
    fn safe_windows() {
        let objects = vec![
            track("cruise", Role::Object, 0.0, 30.0, |_| 12.0),
            track("brake", Role::Object, 0.0, 30.0, |t| if (3.0..4.0).contains(&t) { 20.0 - 2.0 * (t - 3.0) } else if t < 3.0 { 20.0 } else { 18.0 }),
            track("late", Role::Object, 8.0, 30.0, |_| 12.0),
            track("short", Role::Object, 0.0, 4.0, |_| 12.0),
        ];
        let p = build_periods(&event(None, Some(20.0), None, objects)).unwrap();
        assert_eq!(p.candidates, vec!["cruise", "brake", "late"]);
        let (lo, hi) = p.safe["cruise"];
        assert!((lo - 1.5).abs() < 1e-12 && (hi - 6.5).abs() < 1e-12);
        assert!(!p.safe.contains_key("brake"));
        // 9.5 .. min(14.5, 12.5) is exactly 3 s
        let (lo, hi) = p.safe["late"];
        assert!((lo - 9.5).abs() < 1e-12 && (hi - 12.5).abs() < 1e-12);
        assert!(!p.safe.contains_key("short"));
    }

    fn periods(candidates: &[&str]) -> PeriodSpec {
        PeriodSpec {
            event_id: "e".into(),
            impact_time: 5.0,
            danger: (3.0, 5.5),
            candidates: candidates.iter().map(|s| s.to_string()).collect(),
            safe: BTreeMap::new(),
        }
    }

    fn series(f: impl Fn(f64) -> f64) -> RiskSeries {
        let times: Vec<f64> = (0..=55).map(|k| k as f64 * 0.1).collect();
        let values = times.iter().map(|&t| f(t)).collect();
        RiskSeries::new(times, values)
    }

    #[test]
    fn stage_one_picks_rising_object() {
        let p = periods(&["a", "b"]);
        let mut s = BTreeMap::new();
        s.insert("a".to_string(), series(|t| if t >= 3.0 { 2.0 } else { 0.0 }));
        s.insert("b".to_string(), series(|_| 1.0));
        assert_eq!(stage_one(&p, &s).as_deref(), Some("a"));
    }

    #[test]
    fn stage_one_rejects_and_abstains() {
        let p = periods(&["a"]);
        let mut s = BTreeMap::new();
        s.insert("a".to_string(), series(|t| if t >= 3.0 { 1.0 } else { 2.0 }));
        assert_eq!(stage_one(&p, &s), None);
        let mut s = BTreeMap::new();
        s.insert("a".to_string(), RiskSeries::new(vec![3.0, 3.1, 3.2], vec![1.0, 2.0, 3.0]));
        assert_eq!(stage_one(&p, &s), None);
    }

    fn votes(v: &[Option<&str>]) -> Vec<Option<String>> {
        v.iter().map(|x| x.map(str::to_owned)).collect()
    }

    fn vote_oracle(v: &[Option<String>], inclusive: bool) -> Option<String> {
        let total = if inclusive { v.len() } else { v.iter().flatten().count() } as f64;
        let names: Vec<&String> = v.iter().flatten().collect();
        names.iter().find_map(|&cand| {
            let f = names.iter().filter(|n| **n == cand).count() as f64;
            let a = names.len() as f64 - f;
            (f / total > 1.0 / 3.0 && a / total < 1.0 / 3.0).then(|| cand.clone())
        })
    }

    #[test]
    fn vote_examples_and_tables() {
        assert_eq!(vote(&votes(&[Some("A"), Some("A"), Some("A")]), true).as_deref(), Some("A"));
        assert_eq!(vote(&votes(&[Some("A"), Some("B"), None]), true), None);
        assert_eq!(vote(&votes(&[None, None, None]), true), None);
        let alphabet = [None, Some("A"), Some("B"), Some("C")];
        for n in 1..=6u32 {
            for code in 0..4usize.pow(n) {
                let v: Vec<Option<String>> = (0..n)
                    .map(|i| alphabet[(code / 4usize.pow(i)) % 4].map(str::to_owned))
                    .collect();
                for inclusive in [true, false] {
                    assert_eq!(vote(&v, inclusive), vote_oracle(&v, inclusive), "{v:?} {inclusive}");
                }
            }
        }
    }

    #[test]
    fn alert_duration() {
        let short = [0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        assert!(alert_critical(&short, 5, true) <= 0.5);
        let split = [1.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        assert_eq!(alert_critical(&split, 5, true), 1.0);
        assert_eq!(alert_critical(&split, 5, false), 0.0);
        assert_eq!(alert_critical(&[1.0; 3], 5, true), f64::NEG_INFINITY);
    }

    #[test]
    fn confusion_example() {
        let c = ConfusionCounts { tp: 8, fn_: 2, fps: 1, tns: 9 };
        assert!((c.precision() - 8.0 / 9.0).abs() < 1e-12);
        assert!((c.recall() - 0.8).abs() < 1e-12);
        assert!((c.f1() - 0.842105263).abs() < 1e-6);
        assert!((c.r_fn() - 0.2).abs() < 1e-12);
        assert!((c.r_fp() - 0.1).abs() < 1e-12);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"fn\":2"));
    }

    #[test]
    fn tti_examples() {
        let s = series(|t| if t >= 3.2 - 1e-9 { 1.0 } else { 0.0 });
        assert!((tti(&s, 0.5, 5.0).unwrap() - 1.8).abs() < 1e-9);
        let s = series(|_| 1.0);
        assert!((tti(&s, 0.5, 5.0).unwrap() - 5.0).abs() < 1e-9);
        let s = series(|t| if (1.0 - 1e-9..2.0).contains(&t) || t >= 4.0 - 1e-9 { 1.0 } else { 0.0 });
        assert!((tti(&s, 0.5, 5.0).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(tti(&series(|_| 0.0), 0.5, 5.0), None);
    }

    fn exact_binomial_cdf(m: u64, n: u64) -> (BigUint, BigUint) {
        let mut c = BigUint::from(1u32);
        let mut acc = BigUint::from(0u32);
        for i in 0..=m {
            if i > 0 {
                c = c * BigUint::from(n - i + 1) / BigUint::from(i);
            }
            acc += &c;
        }
        (acc, BigUint::from(1u32) << n)
    }

    fn ci_oracle(n: u64) -> Option<u64> {
        // largest k with 2 * cdf(k - 1) <= 0.01, i.e. 200 * num <= den
        let mut k = None;
        for cand in 1..=n.div_ceil(2) {
            let (num, den) = exact_binomial_cdf(cand - 1, n);
            if num * BigUint::from(200u32) <= den {
                k = Some(cand);
            } else {
                break;
            }
        }
        k
    }

    #[test]
    fn sign_test_ci_matches_exact_binomial() {
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        assert_eq!(sign_test_ci(&x, 0.99), Some((1.0, 9.0)));
        assert_eq!(sign_test_ci(&x[..7], 0.99), None);
        for n in 1..=300u64 {
            let x: Vec<f64> = (1..=n).map(|v| v as f64).collect();
            let expect = ci_oracle(n).map(|k| (k as f64, (n - k + 1) as f64));
            assert_eq!(sign_test_ci(&x, 0.99), expect, "n = {n}");
        }
    }

    #[test]
    fn percentile_linear() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&x, 0.5), 2.5);
        assert_eq!(percentile(&x, 0.25), 1.75);
        assert_eq!(percentile(&x, 0.75), 3.25);
    }

    fn pos(id: usize, values: &[f64], critical: Option<f64>) -> PositiveItem {
        let times: Vec<f64> = (0..values.len()).map(|k| k as f64 * 0.1).collect();
        let impact = times.last().copied().unwrap_or(0.0);
        PositiveItem {
            event_id: format!("p{id}"),
            impact_time: impact,
            critical: critical.unwrap_or_else(|| alert_critical(values, 5, true)),
            series: RiskSeries::new(times, values.to_vec()),
        }
    }

    fn neg(id: usize, critical: f64) -> NegativeItem {
        NegativeItem { event_id: format!("n{id}"), object_id: "o".into(), critical }
    }

    #[test]
    fn perfect_scorer() {
        let positives: Vec<_> = (0..4).map(|i| pos(i, &[5.0; 8], None)).collect();
        let negatives: Vec<_> = (0..6).map(|i| neg(i, 1.0)).collect();
        let ev = curves_and_metrics("s", &positives, &negatives, &EvalOptions::default()).unwrap();
        assert_eq!(ev.report.auprc, 1.0);
        assert_eq!(ev.report.a_roc_80, 1.0);
        assert_eq!(ev.report.a_roc_90, 1.0);
        assert_eq!(ev.report.precision_prc_80, Some(1.0));
        assert_eq!(ev.report.max_f1, 1.0);
        assert_eq!(ev.report.best_threshold, Some(1.0));
        assert!((ev.report.mtti_star.unwrap() - 0.7).abs() < 1e-9);
    }

    #[test]
    fn precision_na_when_recall_unreachable() {
        let positives = vec![pos(0, &[5.0; 8], Some(f64::NEG_INFINITY))];
        let negatives = vec![neg(0, 1.0)];
        let pts = curve(&positives, &negatives, &threshold_grid(&positives, &negatives, 512));
        assert_eq!(precision_at_recall(&pts, 0.8), None);
    }

    struct Dataset {
        positives: Vec<Vec<f64>>,
        negatives: Vec<f64>,
    }

    fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
        let n_pos = rng.random_range(1..=6);
        let n_neg = rng.random_range(0..=12 - n_pos);
        let positives = (0..n_pos)
            .map(|_| {
                let len = rng.random_range(3..=10);
                (0..len).map(|_| f64::from(rng.random_range(0..6))).collect()
            })
            .collect();
        let negatives = (0..n_neg).map(|_| f64::from(rng.random_range(0..6))).collect();
        Dataset { positives, negatives }
    }

    struct OracleMetrics {
        auprc: f64,
        a_roc: [f64; 2],
        prec: [Option<f64>; 2],
        f1: f64,
        mtti: Option<f64>,
    }

    fn oracle(d: &Dataset) -> OracleMetrics {
        let mut ths: Vec<f64> = d.positives.iter().flatten().chain(&d.negatives).copied().collect();
        ths.sort_by(f64::total_cmp);
        ths.dedup();
        ths.insert(0, f64::NEG_INFINITY);
        let p = d.positives.len() as f64;
        let n = d.negatives.len() as f64;
        let mut rows = Vec::new();
        for &th in &ths {
            let detected: Vec<&Vec<f64>> =
                d.positives.iter().filter(|s| s.iter().filter(|v| **v > th).count() >= 5).collect();
            let tp = detected.len() as f64;
            let fp = d.negatives.iter().filter(|v| **v > th).count() as f64;
            let prec = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
            let rec = tp / p;
            let fpr = if n == 0.0 { 0.0 } else { fp / n };
            let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
            let mut ttis: Vec<f64> = detected
                .iter()
                .filter_map(|s| {
                    let impact = 0.1 * (s.len() - 1) as f64;
                    (0..s.len())
                        .rev()
                        .find(|&k| s[k] > th && (k == 0 || s[k - 1] <= th))
                        .map(|k| impact - 0.1 * k as f64)
                })
                .filter(|t| *t < 10.0)
                .collect();
            ttis.sort_by(f64::total_cmp);
            let mtti = (!ttis.is_empty()).then(|| {
                let m = ttis.len();
                if m % 2 == 1 { ttis[m / 2] } else { 0.5 * (ttis[m / 2 - 1] + ttis[m / 2]) }
            });
            rows.push((rec, prec, fpr, f1, mtti));
        }
        let mut pr: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.1)).collect();
        pr.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.partial_cmp(&a.1).unwrap()));
        let mut auprc = 0.0;
        for i in 1..pr.len() {
            auprc += (pr[i].0 - pr[i - 1].0) * (pr[i].1 + pr[i - 1].1) / 2.0;
        }
        let mut roc: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.2)).collect();
        roc.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
        let a_roc = [0.8, 0.9].map(|r: f64| {
            let mut area = 0.0;
            for i in 1..roc.len() {
                let (t0, f0) = roc[i - 1];
                let (t1, f1) = roc[i];
                if t1 > t0 && t1 > r {
                    let a = if t0 < r { r } else { t0 };
                    let slope = (f1 - f0) / (t1 - t0);
                    let fa = f0 + slope * (a - t0);
                    area += (t1 - a) - (t1 - a) * (fa + f1) / 2.0;
                }
            }
            area / (1.0 - r)
        });
        let prec = [0.8, 0.9].map(|r| {
            rows.iter().filter(|x| x.0 >= r).map(|x| x.1).reduce(f64::max)
        });
        let mut best = 0;
        for i in 0..rows.len() {
            if rows[i].3 > rows[best].3 {
                best = i;
            }
        }
        OracleMetrics { auprc, a_roc, prec, f1: rows[best].3, mtti: rows[best].4 }
    }

    #[test]
    fn metrics_match_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..3000 {
            let d = random_dataset(&mut rng);
            let positives: Vec<_> = d.positives.iter().enumerate().map(|(i, s)| pos(i, s, None)).collect();
            let negatives: Vec<_> = d.negatives.iter().enumerate().map(|(i, &c)| neg(i, c)).collect();
            let r = curves_and_metrics("s", &positives, &negatives, &EvalOptions::default()).unwrap().report;
            let o = oracle(&d);
            assert!((r.auprc - o.auprc).abs() < 1e-12, "auprc {} {}", r.auprc, o.auprc);
            assert!((r.a_roc_80 - o.a_roc[0]).abs() < 1e-12);
            assert!((r.a_roc_90 - o.a_roc[1]).abs() < 1e-12);
            assert_eq!(r.precision_prc_80, o.prec[0]);
            assert_eq!(r.precision_prc_90, o.prec[1]);
            assert!((r.max_f1 - o.f1).abs() < 1e-12);
            match (r.mtti_star, o.mtti) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn threshold_grid_subsamples() {
        let positives: Vec<_> = (0..1000).map(|i| pos(i, &[0.0], Some(i as f64))).collect();
        let grid = threshold_grid(&positives, &[], 512);
        assert_eq!(grid.len(), 512);
        assert_eq!(grid[0], f64::NEG_INFINITY);
        assert_eq!(grid[1], 0.0);
        assert_eq!(grid[511], 999.0);
    }

    #[test]
    fn evaluate_end_to_end_and_outputs() {
        let mut events = Vec::new();
        for e in 0..6 {
            let mut p = periods(&["a", "b"]);
            p.event_id = format!("ev{e}");
            p.safe.insert("b".into(), (0.5, 2.5));
            let mut risks = BTreeMap::new();
            for (k, scorer) in ["good", "flat"].iter().enumerate() {
                let mut s = BTreeMap::new();
                let bump = 1.0 + e as f64 * 0.1;
                s.insert("a".to_string(), series(move |t| if t >= 3.0 { 2.0 * bump } else { 0.0 }));
                s.insert("b".to_string(), series(move |_| if k == 0 { 0.5 } else { 3.0 }));
                risks.insert(scorer.to_string(), s);
            }
            events.push(EventScores { periods: p, risks });
        }
        let out = evaluate(&events, &EvalOptions::default()).unwrap();
        assert!(out.conflicting.values().all(|c| c.as_deref() == Some("a")));
        let good = &out.scorers["good"].report;
        assert_eq!(good.auprc, 1.0);
        assert_eq!(good.n_positives, 6);
        assert_eq!(good.n_negatives, 6);
        assert!((good.mtti_star.unwrap() - 2.0).abs() < 1e-9);
        assert!(out.scorers["flat"].report.auprc < 1.0);
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &out).unwrap();
        render_curves(dir.path(), dir.path()).unwrap();
        for f in ["report.json", "roc.csv", "prc.csv", "atc.csv", "roc.svg", "prc.svg", "atc.svg"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let rows = read_curve_csv(&dir.path().join("prc.csv")).unwrap();
        assert_eq!(rows.len(), out.scorers.values().map(|s| s.curve.len()).sum::<usize>());
        assert!(rows.iter().any(|(_, p)| p.threshold == f64::NEG_INFINITY));
    }

    #[test]
    fn evaluate_without_winner_fails() {
        let p = periods(&["a"]);
        let mut risks = BTreeMap::new();
        let mut s = BTreeMap::new();
        s.insert("a".to_string(), series(|_| 1.0));
        risks.insert("x".to_string(), s);
        let r = evaluate(&[EventScores { periods: p, risks }], &EvalOptions::default());
        assert!(matches!(r, Err(GssmError::Evaluation(_))));
    }

    fn dataset_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (prop::collection::vec(-5.0f64..5.0, 1..20), prop::collection::vec(-5.0f64..5.0, 0..20))
    }

    proptest! {
        #[test]
        fn counts_monotone_and_consistent((p, n) in dataset_strategy()) {
            let positives: Vec<_> = p.iter().enumerate().map(|(i, &c)| pos(i, &[0.0], Some(c))).collect();
            let negatives: Vec<_> = n.iter().enumerate().map(|(i, &c)| neg(i, c)).collect();
            let grid = threshold_grid(&positives, &negatives, 512);
            let pts = curve(&positives, &negatives, &grid);
            for (th, w) in grid.iter().zip(&pts) {
                let c = confusion_counts(&positives, &negatives, *th);
                prop_assert_eq!(c.tp + c.fn_, positives.len());
                prop_assert_eq!(c.fps + c.tns, negatives.len());
                prop_assert!((w.recall + w.r_fn - 1.0).abs() < 1e-12);
            }
            for w in pts.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
                prop_assert!(w[1].r_fp <= w[0].r_fp);
            }
        }

        #[test]
        fn ci_contains_median(mut x in prop::collection::vec(-100.0f64..100.0, 1..80)) {
            x.sort_by(f64::total_cmp);
            let med = percentile(&x, 0.5);
            if let Some((lo, hi)) = sign_test_ci(&x, 0.99) {
                prop_assert!(lo <= med && med <= hi);
            }
        }

        #[test]
        fn dominating_prc_has_larger_auprc((p, n) in dataset_strategy(), drops in prop::collection::vec(0.0f64..3.0, 20)) {
            let positives: Vec<_> = p.iter().enumerate().map(|(i, &c)| pos(i, &[0.0], Some(c))).collect();
            let a: Vec<_> = n.iter().enumerate().map(|(i, &c)| neg(i, c)).collect();
            let b: Vec<_> = n.iter().enumerate().map(|(i, &c)| neg(i, c - drops[i])).collect();
            let opts = EvalOptions::default();
            let ra = curves_and_metrics("a", &positives, &a, &opts).unwrap().report;
            let rb = curves_and_metrics("b", &positives, &b, &opts).unwrap().report;
            prop_assert!(rb.auprc >= ra.auprc - 1e-12);
        }
    }
}
