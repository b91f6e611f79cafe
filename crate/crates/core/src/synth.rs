//! Seeded synthetic interaction data with known conditional spacing laws.
//!
//! Centroid spacing between the subject and each object follows
//! `ln s = μ(X) + σ·z(t)`, where `z` is a smooth stationary process with
//! standard normal marginals (random Fourier features) and `μ` is affine in
//! the subject speed and a wet-surface flag. Conflict events pull `z` of one
//! object down to a target percentile along a cosine ramp that bottoms out at
//! impact.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    grid_time, normalize_angle, save_event, AgentTrack, EnvironmentTags, Event, EventAnnotations, EventType,
    Lighting, Role, Severity, Surface, TrafficDensity, TrajectoryFrame, Weather,
};
use crate::error::{GssmError, Result};
use crate::features::sample_seed;
use crate::lognormal::LognormalParams;
use crate::score::normal_cdf;

/// `μ = mu0 + speed_coef·(v_i − speed_mean)/speed_std + wet_coef·wet`, constant `σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextModel {
    pub mu0: f64,
    pub speed_coef: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub wet_coef: f64,
    pub sigma: f64,
}

impl Default for ContextModel {
    fn default() -> Self {
        Self { mu0: 2.0, speed_coef: 0.3, speed_mean: 15.0, speed_std: 4.0, wet_coef: -0.2, sigma: 0.4 }
    }
}

impl ContextModel {
    pub fn mu(&self, speed_i: f64, wet: bool) -> f64 {
        self.mu0 + self.speed_coef * (speed_i - self.speed_mean) / self.speed_std + if wet { self.wet_coef } else { 0.0 }
    }

    pub fn params(&self, speed_i: f64, wet: bool) -> LognormalParams {
        LognormalParams::new(self.mu(speed_i, wet), (self.sigma * self.sigma).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub seed: u64,
    /// Short one-object events for training.
    pub n_train_events: usize,
    /// Long multi-object events with an injected conflict.
    pub n_test_events: usize,
    pub objects_per_event: usize,
    pub context: ContextModel,
    /// Spacing percentile reached at impact by the conflicting object; each
    /// event draws it log-uniformly between `deepest_percentile` and this value.
    pub conflict_percentile: f64,
    pub deepest_percentile: f64,
    pub snapshot_duration: f64,
    pub event_duration: f64,
    /// Impact time is drawn uniformly from this range.
    pub impact_range: (f64, f64),
    /// Length of the ramp from normal interaction down to the dip.
    pub dip_ramp: f64,
    pub recovery: f64,
    pub length_scale: f64,
    pub fourier_features: usize,
    /// Scale of the closing-speed process behind training snapshots (m/s).
    pub closing_speed: f64,
    pub wet_probability: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            seed: 131,
            n_train_events: 2000,
            n_test_events: 200,
            objects_per_event: 3,
            context: ContextModel::default(),
            conflict_percentile: 0.01,
            deepest_percentile: 1e-4,
            snapshot_duration: 2.6,
            event_duration: 26.0,
            impact_range: (20.0, 23.0),
            dip_ramp: 12.0,
            recovery: 3.0,
            length_scale: 3.0,
            fourier_features: 64,
            closing_speed: 1.5,
            wet_probability: 0.3,
        }
    }
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0001;
const TEST_STREAM: u64 = 0x7465_7374_0000_0002;
const MIN_SPEED: f64 = 5.0;
const MAX_SPEED: f64 = 28.0;
const MIN_SPACING: f64 = 0.5;
/// Largest spacing deficit (m) a snapshot history may show relative to its final spacing.
const MAX_RECEDE: f64 = 1.0;
/// Danger lead plus the safe-window requirements before it.
const MIN_IMPACT: f64 = 14.0;

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GssmError::Spec(msg.to_owned()));
        if !(self.conflict_percentile > 0.0 && self.conflict_percentile < 0.5) {
            return bad("conflict percentile must lie in (0, 0.5)");
        }
        if !(self.deepest_percentile > 0.0 && self.deepest_percentile <= self.conflict_percentile) {
            return bad("deepest percentile must lie in (0, conflict_percentile]");
        }
        if !(self.context.sigma > 0.0 && self.context.speed_std > 0.0) {
            return bad("sigma and speed_std must be positive");
        }
        if self.objects_per_event == 0 || self.fourier_features == 0 {
            return bad("objects_per_event and fourier_features must be at least 1");
        }
        if !(self.length_scale > 0.0 && self.dip_ramp > 0.0 && self.recovery > 0.0 && self.closing_speed >= 0.0) {
            return bad("length scale, dip ramp and recovery must be positive, closing speed non-negative");
        }
        if self.snapshot_duration < 0.1 {
            return bad("snapshot duration must cover at least two frames");
        }
        let (lo, hi) = self.impact_range;
        if !(lo >= MIN_IMPACT && lo <= hi && hi + 1.0 <= self.event_duration) {
            return bad("impact range must satisfy 14 <= lo <= hi <= event_duration - 1");
        }
        if !(0.0..=1.0).contains(&self.wet_probability) {
            return bad("wet probability must lie in [0, 1]");
        }
        Ok(())
    }

    /// Standard-normal quantiles of the shallowest and deepest conflict percentiles.
    pub fn conflict_z_range(&self) -> (f64, f64) {
        (normal_quantile(self.conflict_percentile), normal_quantile(self.deepest_percentile))
    }
}

/// Inverse standard normal CDF by bisection.
pub fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Stationary unit-variance process `√(2/K) Σ cos(ω_k t + b_k)`, `ω_k ~ N(0, 1/ℓ²)`.
#[derive(Debug, Clone)]
pub struct FourierProcess {
    omega: Vec<f64>,
    phase: Vec<f64>,
}

impl FourierProcess {
    pub fn sample(rng: &mut impl Rng, k: usize, length_scale: f64) -> Self {
        let omega = (0..k).map(|_| StandardNormal.sample(rng)).map(|w: f64| w / length_scale).collect();
        let phase = (0..k).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Self { omega, phase }
    }

    pub fn at(&self, t: f64) -> f64 {
        let scale = (2.0 / self.omega.len() as f64).sqrt();
        scale * self.omega.iter().zip(&self.phase).map(|(w, b)| (w * t + b).cos()).sum::<f64>()
    }
}

/// Weight of the conflict dip: 0 before the ramp, 1 at impact, 0 after recovery.
pub fn dip_weight(t: f64, impact: f64, ramp: f64, recovery: f64) -> f64 {
    if t <= impact - ramp || t >= impact + recovery {
        0.0
    } else if t <= impact {
        0.5 * (1.0 - (PI * (t - impact + ramp) / ramp).cos())
    } else {
        0.5 * (1.0 + (PI * (t - impact) / recovery).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTruth {
    pub event_id: String,
    pub wet: bool,
    pub conflict: Option<ConflictMarker>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictMarker {
    pub object_id: String,
    pub percentile: f64,
    pub z: f64,
    pub impact_time: f64,
    pub dip_start: f64,
    pub dip_end: f64,
}

/// Contents of `ground_truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: GeneratorSpec,
    pub mu_formula: String,
    pub conflict_z_range: (f64, f64),
    pub events: Vec<EventTruth>,
}

fn draw_environment(rng: &mut impl Rng, wet_probability: f64) -> EnvironmentTags {
    let pick = |rng: &mut dyn rand::RngCore, n: usize| rng.random_range(0..n);
    let lighting = Lighting::ALL[pick(rng, Lighting::ALL.len())];
    let weather = Weather::ALL[pick(rng, Weather::ALL.len())];
    let traffic_density = TrafficDensity::ALL[pick(rng, TrafficDensity::ALL.len())];
    let surface = if rng.random::<f64>() < wet_probability {
        Surface::Wet
    } else {
        let others: Vec<Surface> = Surface::ALL.iter().copied().filter(|s| *s != Surface::Wet).collect();
        others[pick(rng, others.len())]
    };
    EnvironmentTags { lighting, weather, surface, traffic_density }
}

/// Bearings (subject frame) an object may sit at.
const BEARINGS: [f64; 6] = [0.0, PI, 0.45, -0.45, 2.7, -2.7];

/// Positions on `n` grid steps plus one guard step at each end.
struct Path2 {
    x: Vec<f64>,
    y: Vec<f64>,
}

fn frames_from_positions(path: &Path2, with_accel: bool) -> Vec<TrajectoryFrame> {
    let n = path.x.len() - 2;
    let vel: Vec<[f64; 2]> = (1..=n)
        .map(|k| [(path.x[k + 1] - path.x[k - 1]) / 0.2, (path.y[k + 1] - path.y[k - 1]) / 0.2])
        .collect();
    let heading: Vec<f64> = vel.iter().map(|v| v[1].atan2(v[0])).collect();
    let speed: Vec<f64> = vel.iter().map(|v| v[0].hypot(v[1])).collect();
    let diff = |k: usize, f: &dyn Fn(usize, usize) -> f64| -> f64 {
        if n == 1 {
            0.0
        } else if k == 0 {
            f(1, 0) / 0.1
        } else if k == n - 1 {
            f(n - 1, n - 2) / 0.1
        } else {
            f(k + 1, k - 1) / 0.2
        }
    };
    (0..n)
        .map(|k| TrajectoryFrame {
            time: grid_time(k as i64),
            x: path.x[k + 1],
            y: path.y[k + 1],
            heading: heading[k],
            speed: speed[k],
            yaw_rate: diff(k, &|a, b| normalize_angle(heading[a] - heading[b])),
            accel: with_accel.then(|| diff(k, &|a, b| speed[a] - speed[b])),
        })
        .collect()
}

struct SubjectPlan {
    path: Path2,
    heading: Vec<f64>,
    /// Speed implied by the stored positions on each output step.
    speed: Vec<f64>,
}

fn subject_plan(rng: &mut impl Rng, n: usize, ctx: &ContextModel) -> SubjectPlan {
    let z: f64 = StandardNormal.sample(rng);
    let v0 = (ctx.speed_mean + ctx.speed_std * z).clamp(MIN_SPEED, MAX_SPEED);
    let amp = rng.random_range(0.0..1.0);
    let period = rng.random_range(15.0..30.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let psi0 = rng.random_range(-PI..PI);
    let (mut x, mut y) = (vec![0.0], vec![0.0]);
    let speed_at = |k: usize| v0 + amp * (2.0 * PI * grid_time(k as i64 - 1) / period + phase).sin();
    for k in 1..n + 2 {
        let v = speed_at(k);
        x.push(x[k - 1] + v * 0.1 * psi0.cos());
        y.push(y[k - 1] + v * 0.1 * psi0.sin());
    }
    let path = Path2 { x, y };
    let frames = frames_from_positions(&path, true);
    SubjectPlan {
        heading: frames.iter().map(|f| f.heading).collect(),
        speed: frames.iter().map(|f| f.speed).collect(),
        path,
    }
}

/// Object path at log-spacing `ln_s[k]` along a fixed bearing from the subject.
fn object_path(subject: &SubjectPlan, bearing: f64, ln_s: impl Fn(usize) -> f64) -> Path2 {
    let n = subject.path.x.len();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for k in 0..n {
        let psi = if k == 0 {
            subject.heading[0]
        } else if k == n - 1 {
            subject.heading[n - 3]
        } else {
            subject.heading[k - 1]
        };
        let s = ln_s(k).exp();
        x.push(subject.path.x[k] + s * (psi + bearing).cos());
        y.push(subject.path.y[k] + s * (psi + bearing).sin());
    }
    Path2 { x, y }
}

fn track(agent_id: &str, role: Role, frames: Vec<TrajectoryFrame>, rng: &mut impl Rng) -> AgentTrack {
    AgentTrack {
        agent_id: agent_id.to_owned(),
        role,
        length: rng.random_range(4.0..5.2),
        width: rng.random_range(1.7..2.0),
        frames,
    }
}

/// Speed used by the context model on guard step `k` of a subject plan.
fn plan_speed(plan: &SubjectPlan, k: usize) -> f64 {
    let n = plan.speed.len();
    plan.speed[k.saturating_sub(1).min(n - 1)]
}

/// One-object event whose final frame is a draw from the context model.
///
/// Earlier spacings are `s_T + c·∫ w`, with closing speed `w` and scale `c`
/// independent of `s_T`, so the history carries no information about the final spacing.
pub fn snapshot_event(spec: &GeneratorSpec, index: usize) -> (Event, EventTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed ^ TRAIN_STREAM, index as u64));
    let n = (spec.snapshot_duration / 0.1).round() as usize;
    let environment = draw_environment(&mut rng, spec.wet_probability);
    let wet = environment.surface == Surface::Wet;
    let plan = subject_plan(&mut rng, n, &spec.context);
    let closing = FourierProcess::sample(&mut rng, spec.fourier_features, spec.length_scale);
    let offset = rng.random_range(0.0..1000.0);
    let bearing = BEARINGS[rng.random_range(0..BEARINGS.len())];
    let eps: f64 = StandardNormal.sample(&mut rng);
    let ctx = spec.context;
    let s_final = (ctx.mu(plan_speed(&plan, n), wet) + ctx.sigma * eps).exp();
    let w = |k: usize| spec.closing_speed * closing.at(offset + grid_time(k as i64 - 1));
    let mut travelled = vec![0.0];
    for k in 1..n + 2 {
        travelled.push(travelled[k - 1] + 0.05 * (w(k - 1) + w(k)));
    }
    let deepest = travelled.iter().map(|d| travelled[n] - d).fold(0.0, f64::min);
    let shrink = if deepest < -MAX_RECEDE { MAX_RECEDE / -deepest } else { 1.0 };
    let path = object_path(&plan, bearing, |k| (s_final + shrink * (travelled[n] - travelled[k])).max(MIN_SPACING).ln());
    let object = track("obj1", Role::Object, frames_from_positions(&path, false), &mut rng);
    let subject = track("ego", Role::Subject, frames_from_positions(&plan.path, true), &mut rng);
    let event_id = format!("train_{index:06}");
    let event = Event {
        event_id: event_id.clone(),
        severity: Severity::Baseline,
        tracks: vec![subject, object],
        environment,
        annotations: EventAnnotations {
            start_time: None,
            impact_time: None,
            end_time: None,
            reaction_time: None,
            event_type: EventType::Other,
        },
    };
    (event, EventTruth { event_id, wet, conflict: None })
}

/// Multi-object event with one object dipping to the conflict percentile at impact.
pub fn conflict_event(spec: &GeneratorSpec, index: usize) -> (Event, EventTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed ^ TEST_STREAM, index as u64));
    let n = (spec.event_duration / 0.1).round() as usize + 1;
    let environment = draw_environment(&mut rng, spec.wet_probability);
    let wet = environment.surface == Surface::Wet;
    let plan = subject_plan(&mut rng, n, &spec.context);
    let (lo, hi) = spec.impact_range;
    let impact = grid_time((rng.random_range(lo..=hi) / 0.1).round() as i64);
    let conflicting = rng.random_range(0..spec.objects_per_event);
    let (shallow, deep) = (spec.conflict_percentile.ln(), spec.deepest_percentile.ln());
    let percentile = if shallow > deep { rng.random_range(deep..shallow).exp() } else { spec.conflict_percentile };
    let z_dip = normal_quantile(percentile);
    let ctx = spec.context;
    let mut tracks = Vec::new();
    let mut event_type = EventType::Other;
    for j in 0..spec.objects_per_event {
        let process = FourierProcess::sample(&mut rng, spec.fourier_features, spec.length_scale);
        let mut bearing = BEARINGS[rng.random_range(0..BEARINGS.len())];
        if j == conflicting {
            bearing = BEARINGS[rng.random_range(0..4)];
            event_type = if bearing == 0.0 { EventType::RearEnd } else { EventType::AdjacentLane };
        }
        let path = object_path(&plan, bearing, |k| {
            let t = grid_time(k as i64 - 1);
            let z = process.at(t);
            let w = if j == conflicting { dip_weight(t, impact, spec.dip_ramp, spec.recovery) } else { 0.0 };
            ctx.mu(plan_speed(&plan, k), wet) + ctx.sigma * ((1.0 - w) * z + w * z_dip)
        });
        tracks.push(track(&format!("obj{}", j + 1), Role::Object, frames_from_positions(&path, false), &mut rng));
    }
    tracks.insert(0, track("ego", Role::Subject, frames_from_positions(&plan.path, true), &mut rng));
    let event_id = format!("test_{index:06}");
    let severity = if rng.random::<bool>() { Severity::Crash } else { Severity::NearCrash };
    let event = Event {
        event_id: event_id.clone(),
        severity,
        tracks,
        environment,
        annotations: EventAnnotations {
            start_time: Some(impact - 3.0),
            impact_time: Some(impact),
            end_time: Some(impact + 1.0),
            reaction_time: None,
            event_type,
        },
    };
    let marker = ConflictMarker {
        object_id: format!("obj{}", conflicting + 1),
        percentile,
        z: z_dip,
        impact_time: impact,
        dip_start: impact - spec.dip_ramp,
        dip_end: impact + spec.recovery,
    };
    (event, EventTruth { event_id, wet, conflict: Some(marker) })
}

pub fn ground_truth(spec: &GeneratorSpec, events: Vec<EventTruth>) -> GroundTruth {
    let c = spec.context;
    GroundTruth {
        spec: *spec,
        mu_formula: format!(
            "mu = {} + {}*(speed_i - {})/{} + {}*wet_surface; sigma = {}",
            c.mu0, c.speed_coef, c.speed_mean, c.speed_std, c.wet_coef, c.sigma
        ),
        conflict_z_range: spec.conflict_z_range(),
        events,
    }
}

/// Writes `train/` and `test/` event files plus `ground_truth.json` under `out`.
pub fn generate_dataset(spec: &GeneratorSpec, out: &Path) -> Result<GroundTruth> {
    spec.validate()?;
    let mut truths = Vec::new();
    for (dir, count, make) in [
        ("train", spec.n_train_events, snapshot_event as fn(&GeneratorSpec, usize) -> (Event, EventTruth)),
        ("test", spec.n_test_events, conflict_event),
    ] {
        let dir = out.join(dir);
        fs::create_dir_all(&dir)?;
        let made: Vec<(Event, EventTruth)> = (0..count).into_par_iter().map(|i| make(spec, i)).collect();
        for (event, truth) in made {
            save_event(&event, &dir.join(format!("{}.csv", event.event_id)))?;
            truths.push(truth);
        }
    }
    let truth = ground_truth(spec, truths);
    fs::write(out.join("ground_truth.json"), serde_json::to_string_pretty(&truth)?)?;
    Ok(truth)
}

/// Ground-truth parameters per event, keyed by event id.
pub fn truth_index(truth: &GroundTruth) -> BTreeMap<&str, &EventTruth> {
    truth.events.iter().map(|e| (e.event_id.as_str(), e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_event;
    use crate::evaluation::build_periods;
    use crate::score::gssm_score;

    #[test]
    fn quantile_matches_reference() {
        assert!((normal_quantile(0.01) + 2.326_347_874_040_841).abs() < 1e-9);
        assert!(normal_quantile(0.5).abs() < 1e-12);
    }

    #[test]
    fn infeasible_depth_is_rejected() {
        for p in [0.5, 0.7, 0.0] {
            let spec = GeneratorSpec { conflict_percentile: p, deepest_percentile: 1e-6, ..Default::default() };
            assert!(matches!(spec.validate(), Err(GssmError::Spec(_))));
        }
        let spec = GeneratorSpec { deepest_percentile: 0.02, ..Default::default() };
        assert!(matches!(spec.validate(), Err(GssmError::Spec(_))));
        assert!(GeneratorSpec::default().validate().is_ok());
    }

    #[test]
    fn context_free_log_spacing_mean() {
        let spec = GeneratorSpec {
            context: ContextModel { speed_coef: 0.0, wet_coef: 0.0, ..Default::default() },
            ..Default::default()
        };
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for i in 0..n {
            let (e, _) = snapshot_event(&spec, i);
            let (a, b) = (e.tracks[0].frames.last().unwrap(), e.tracks[1].frames.last().unwrap());
            let ln_s = (b.x - a.x).hypot(b.y - a.y).ln();
            sum += ln_s;
            sq += ln_s * ln_s;
        }
        let mean = sum / n as f64;
        let sd = (sq / n as f64 - mean * mean).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean}");
        assert!((sd - 0.4).abs() < 0.01, "sd {sd}");
    }

    #[test]
    fn dip_reaches_target_level_at_impact() {
        let spec = GeneratorSpec { deepest_percentile: 0.01, ..Default::default() };
        let expected = (0.5f64.ln() / 0.99f64.ln()).log10();
        for i in 0..20 {
            let (e, truth) = conflict_event(&spec, i);
            let marker = truth.conflict.unwrap();
            let impact = marker.impact_time;
            let a = e.subject().frame_at(impact).unwrap();
            let b = e.track(&marker.object_id).unwrap().frame_at(impact).unwrap();
            let s = (b.x - a.x).hypot(b.y - a.y);
            let m = gssm_score(s, spec.context.params(a.speed, truth.wet));
            assert!((m - expected).abs() < 1e-6, "{m} vs {expected}");
        }
        assert!((expected - 1.839).abs() < 1e-3);
    }

    #[test]
    fn kinematics_are_consistent() {
        let spec = GeneratorSpec::default();
        for i in 0..10 {
            let (e, _) = conflict_event(&spec, i);
            e.validate().unwrap();
            for t in &e.tracks {
                for w in t.frames.windows(3) {
                    let vx = (w[2].x - w[0].x) / 0.2;
                    let vy = (w[2].y - w[0].y) / 0.2;
                    assert!((vx.hypot(vy) - w[1].speed).abs() < 1e-6);
                    let dpsi = normalize_angle(w[2].heading - w[0].heading) / 0.2;
                    assert!((dpsi - w[1].yaw_rate).abs() < 1e-9);
                }
            }
            let a = e.annotations;
            assert!(a.start_time <= a.impact_time && a.impact_time <= a.end_time);
        }
    }

    #[test]
    fn danger_spacing_below_median() {
        let spec = GeneratorSpec::default();
        let (mut below, mut total) = (0usize, 0usize);
        for i in 0..100 {
            let (e, truth) = conflict_event(&spec, i);
            let marker = truth.conflict.unwrap();
            let periods = build_periods(&e).unwrap();
            let obj = e.track(&marker.object_id).unwrap();
            for f in &obj.frames {
                if f.time < periods.danger.0 - 1e-9 || f.time > periods.danger.1 + 1e-9 {
                    continue;
                }
                let a = e.subject().frame_at(f.time).unwrap();
                let s = (f.x - a.x).hypot(f.y - a.y);
                total += 1;
                below += usize::from(s < spec.context.params(a.speed, truth.wet).median());
            }
            assert!(!periods.safe.is_empty());
        }
        assert!(below as f64 / total as f64 > 0.99, "{below}/{total}");
    }

    #[test]
    fn dataset_is_deterministic_and_reloads() {
        let spec = GeneratorSpec { n_train_events: 3, n_test_events: 2, ..Default::default() };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&spec, d1.path()).unwrap();
        generate_dataset(&spec, d2.path()).unwrap();
        let mut files = Vec::new();
        for sub in ["", "train", "test"] {
            for entry in fs::read_dir(d1.path().join(sub)).unwrap() {
                let p = entry.unwrap().path();
                if p.is_file() {
                    files.push(p.strip_prefix(d1.path()).unwrap().to_owned());
                }
            }
        }
        assert_eq!(files.len(), 1 + 2 * 5);
        for f in &files {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f:?}");
        }
        let (original, _) = conflict_event(&spec, 1);
        let loaded = load_event(&d1.path().join("test").join("test_000001.csv")).unwrap();
        assert_eq!(loaded.tracks.len(), original.tracks.len());
        for (a, b) in loaded.tracks.iter().zip(&original.tracks) {
            assert_eq!(a.frames.len(), b.frames.len());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert!((fa.x - fb.x).abs() < 1e-9 && (fa.speed - fb.speed).abs() < 1e-9);
            }
        }
    }
}
