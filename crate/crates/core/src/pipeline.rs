//! Risk series per interacting pair, scorer set, training-sample extraction
//! and event-level evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{Agent, Measure};
use crate::data::{grid_index, Event};
use crate::error::Result;
use crate::evaluation::{build_periods, evaluate, EvalOptions, EvaluationOutcome, EventScores, RiskSeries};
use crate::features::{extract_features, pair_samples, sample_seed, InteractionSample, HISTORY_STEPS};
use crate::geometry::relative_polar_spacing;
use crate::model::Model;
use crate::score::RiskPoint;

pub const GSSM: &str = "gssm";
pub const FIXED_SPACING: &str = "fixed_spacing";

/// A risk quantifier producing one value per time step (higher is riskier).
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Gssm(&'a Model),
    Baseline(Measure),
    /// Negated centroid spacing.
    FixedSpacing,
}

impl Scorer<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Gssm(_) => GSSM,
            Scorer::Baseline(m) => m.name(),
            Scorer::FixedSpacing => FIXED_SPACING,
        }
    }
}

/// GSSM, the three geometric baselines and the fixed-spacing rule.
pub fn default_scorers(model: &Model) -> Vec<Scorer<'_>> {
    let mut out = vec![Scorer::Gssm(model)];
    out.extend(Measure::ALL.iter().map(|m| Scorer::Baseline(*m)));
    out.push(Scorer::FixedSpacing);
    out
}

/// GSSM level and conflict probability at every step where both agents are observed.
pub fn risk_series(event: &Event, model: &Model, subject_id: &str, object_id: &str) -> Result<Vec<RiskPoint>> {
    let samples = pair_samples(event, subject_id, object_id);
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let params = model.predict(&samples)?;
    Ok(samples.iter().zip(params).map(|(x, p)| RiskPoint::new(x.time, x.s, p)).collect())
}

pub fn scorer_series(event: &Event, scorer: Scorer<'_>, subject_id: &str, object_id: &str) -> Result<RiskSeries> {
    if let Scorer::Gssm(model) = scorer {
        let points = risk_series(event, model, subject_id, object_id)?;
        return Ok(RiskSeries::new(points.iter().map(|p| p.time).collect(), points.iter().map(|p| p.level).collect()));
    }
    let (Some(subject), Some(object)) = (event.track(subject_id), event.track(object_id)) else {
        return Ok(RiskSeries::default());
    };
    let mut series = RiskSeries::default();
    for fj in &object.frames {
        let Some(fi) = subject.frame_at(fj.time) else { continue };
        let value = match scorer {
            Scorer::Baseline(m) => {
                let i = Agent::from_frame(fi, subject.length, subject.width);
                let j = Agent::from_frame(fj, object.length, object.width);
                m.evaluate(&i, &j).risk()
            }
            Scorer::FixedSpacing => {
                -relative_polar_spacing(fi.position(), fi.velocity(), fi.heading, fj.position(), fj.velocity()).s
            }
            Scorer::Gssm(_) => unreachable!(),
        };
        series.times.push(fj.time);
        series.values.push(value);
    }
    Ok(series)
}

/// Periods and all scorer series for every object of an event.
pub fn score_event(event: &Event, scorers: &[Scorer<'_>]) -> Result<EventScores> {
    let periods = build_periods(event)?;
    let subject = event.subject().agent_id.clone();
    let mut risks = BTreeMap::new();
    for scorer in scorers {
        let mut per_object = BTreeMap::new();
        for object in event.objects() {
            per_object.insert(object.agent_id.clone(), scorer_series(event, *scorer, &subject, &object.agent_id)?);
        }
        risks.insert(scorer.name().to_owned(), per_object);
    }
    Ok(EventScores { periods, risks })
}

/// Scores all safety-critical events (in parallel, order preserved) and runs the evaluation.
pub fn evaluate_events(events: &[Event], scorers: &[Scorer<'_>], opts: &EvalOptions) -> Result<EvaluationOutcome> {
    let scored: Vec<EventScores> = events
        .par_iter()
        .filter(|e| e.severity.is_safety_critical())
        .map(|e| score_event(e, scorers))
        .collect::<Result<_>>()?;
    evaluate(&scored, opts)
}

/// Training samples at every `stride`-th step with a full history window.
/// History dropout masks use per-sample seeds derived from `seed`.
pub fn training_samples(events: &[Event], stride: usize, dropout: f64, seed: u64) -> Result<Vec<InteractionSample>> {
    let stride = stride.max(1) as i64;
    let mut jobs = Vec::new();
    for (e, event) in events.iter().enumerate() {
        let subject = event.subject();
        let Some(start) = subject.start_time() else { continue };
        for object in event.objects() {
            let Some(obj_start) = object.start_time() else { continue };
            let k0 = grid_index(start).max(grid_index(obj_start)) + HISTORY_STEPS as i64;
            for f in &object.frames {
                let k = grid_index(f.time);
                if k >= k0 && (k - k0) % stride == 0 && subject.frame_at(f.time).is_some() {
                    jobs.push((e, object.agent_id.as_str(), f.time));
                }
            }
        }
    }
    jobs.par_iter()
        .enumerate()
        .map(|(n, &(e, object, t))| {
            let event = &events[e];
            extract_features(event, &event.subject().agent_id, object, t, dropout, sample_seed(seed, n as u64))
        })
        .collect()
}

/// Deterministic split by event: a `val_fraction` share of event ids goes to validation.
pub fn split_by_event(
    samples: Vec<InteractionSample>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<InteractionSample>, Vec<InteractionSample>) {
    let mut ids: Vec<String> = samples.iter().map(|s| s.event_id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ids.len() as f64 * val_fraction).round() as usize).clamp(usize::from(ids.len() > 1), ids.len().saturating_sub(1).max(1));
    let val_ids: std::collections::BTreeSet<String> = ids.into_iter().take(n_val).collect();
    samples.into_iter().partition(|s| !val_ids.contains(&s.event_id))
}

/// One row per time step: `event_id,object_id,time,M,p`.
pub fn write_risk_csv(path: &Path, rows: &[(String, String, RiskPoint)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["event_id", "object_id", "time", "M", "p"])?;
    for (event, object, p) in rows {
        w.write_record([event.clone(), object.clone(), format!("{:.1}", p.time), p.level.to_string(), p.p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
