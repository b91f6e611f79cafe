//! Context feature groups: current (`X_C`), environment (`X_E`) and history (`X_T`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{grid_index, grid_time, normalize_angle, EnvironmentTags, Event, TrajectoryFrame};
use crate::error::{GssmError, Result};
use crate::geometry::{relative_polar_spacing, to_frame_with_y_along, Vec2};

pub const CURRENT_NAMES: [&str; 13] = [
    "l_i",
    "l_j",
    "half_width_sum",
    "speed_i",
    "obj_vx_local",
    "obj_vy_local",
    "speed_i_sq",
    "speed_j_sq",
    "rel_speed_sq",
    "signed_rel_speed",
    "obj_heading_angle",
    "rho",
    "accel_i",
];
pub const ENV_NAMES: [&str; 4] = ["lighting", "weather", "surface", "traffic_density"];
pub const ENV_CHUNKS: [usize; 4] = [6, 8, 8, 8];
pub const ENV_DIM: usize = 30;
pub const HISTORY_STEPS: usize = 25;
pub const HISTORY_CHANNELS: usize = 4;
pub const HISTORY_NAMES: [&str; 5] = ["history_0.5s", "history_1.0s", "history_1.5s", "history_2.0s", "history_2.5s"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentFeatures {
    pub l_i: f64,
    pub l_j: f64,
    pub half_width_sum: f64,
    pub speed_i: f64,
    pub obj_vx_local: f64,
    pub obj_vy_local: f64,
    pub speed_i_sq: f64,
    pub speed_j_sq: f64,
    pub rel_speed_sq: f64,
    pub signed_rel_speed: f64,
    pub obj_heading_angle: f64,
    pub rho: f64,
    pub accel_i: Option<f64>,
}

impl CurrentFeatures {
    /// Values in [`CURRENT_NAMES`] order; `accel_i` is appended when requested
    /// (missing acceleration encodes as 0).
    pub fn to_vec(&self, include_accel: bool) -> Vec<f64> {
        let mut v = vec![
            self.l_i,
            self.l_j,
            self.half_width_sum,
            self.speed_i,
            self.obj_vx_local,
            self.obj_vy_local,
            self.speed_i_sq,
            self.speed_j_sq,
            self.rel_speed_sq,
            self.signed_rel_speed,
            self.obj_heading_angle,
            self.rho,
        ];
        if include_accel {
            v.push(self.accel_i.unwrap_or(0.0));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentFeatures {
    pub lighting: Vec<f64>,
    pub weather: Vec<f64>,
    pub surface: Vec<f64>,
    pub traffic_density: Vec<f64>,
}

impl EnvironmentFeatures {
    pub fn chunks(&self) -> [&[f64]; 4] {
        [&self.lighting, &self.weather, &self.surface, &self.traffic_density]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.chunks().concat()
    }
}

fn one_hot(len: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

pub fn encode_environment(tags: &EnvironmentTags) -> EnvironmentFeatures {
    EnvironmentFeatures {
        lighting: one_hot(ENV_CHUNKS[0], tags.lighting.index()),
        weather: one_hot(ENV_CHUNKS[1], tags.weather.index()),
        surface: one_hot(ENV_CHUNKS[2], tags.surface.index()),
        traffic_density: one_hot(ENV_CHUNKS[3], tags.traffic_density.index()),
    }
}

/// 25 steps × 4 channels `(ω_i, |v_i|, x_vj, y_vj)`, oldest step first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryFeatures {
    pub values: Vec<[f64; HISTORY_CHANNELS]>,
    /// `true` where a value was dropped out (and set to 0).
    pub mask: Vec<[bool; HISTORY_CHANNELS]>,
    /// Number of most recent steps backed by real frames; older steps are padding.
    pub valid_steps: usize,
}

impl HistoryFeatures {
    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSample {
    pub event_id: String,
    pub subject_id: String,
    pub object_id: String,
    pub time: f64,
    pub s: f64,
    pub current: CurrentFeatures,
    pub environment: EnvironmentFeatures,
    pub history: HistoryFeatures,
}

/// Per-sample seed so that masks do not depend on processing order.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Bernoulli(`p`) dropout mask over the history values.
pub fn dropout_mask(p: f64, seed: u64) -> Vec<[bool; HISTORY_CHANNELS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..HISTORY_STEPS)
        .map(|_| std::array::from_fn(|_| p > 0.0 && rng.random::<f64>() < p))
        .collect()
}

/// Axis of the subject-aligned local frame (velocity direction, i.e. heading).
fn local_axis(frame: &TrajectoryFrame) -> f64 {
    frame.heading
}

fn velocity(frame: &TrajectoryFrame) -> Vec2 {
    frame.velocity()
}

/// Object velocity in the subject's local frame.
fn local_velocity(subject: &TrajectoryFrame, object: &TrajectoryFrame) -> Vec2 {
    to_frame_with_y_along(velocity(object), local_axis(subject))
}

pub fn current_features(
    subject: &TrajectoryFrame,
    object: &TrajectoryFrame,
    dims_i: (f64, f64),
    dims_j: (f64, f64),
) -> (f64, CurrentFeatures) {
    let (vi, vj) = (velocity(subject), velocity(object));
    let spacing = relative_polar_spacing(subject.position(), vi, subject.heading, object.position(), vj);
    let local = local_velocity(subject, object);
    let speed_i = subject.speed;
    let speed_j = object.speed;
    let rel = spacing.rel_speed;
    let sign = (speed_i - speed_j).signum() * if speed_i == speed_j { 0.0 } else { 1.0 };
    let features = CurrentFeatures {
        l_i: dims_i.0,
        l_j: dims_j.0,
        half_width_sum: 0.5 * (dims_i.1 + dims_j.1),
        speed_i,
        obj_vx_local: local[0],
        obj_vy_local: local[1],
        speed_i_sq: speed_i * speed_i,
        speed_j_sq: speed_j * speed_j,
        rel_speed_sq: rel * rel,
        signed_rel_speed: rel * sign,
        obj_heading_angle: normalize_angle(object.heading - local_axis(subject)),
        rho: spacing.rho,
        accel_i: subject.accel,
    };
    (spacing.s, features)
}

/// Builds one interaction sample at time `t`.
///
/// With `dropout_p > 0` the history values are masked by a mask drawn from
/// `seed`; pass `dropout_p = 0` for inference.
pub fn extract_features(
    event: &Event,
    subject_id: &str,
    object_id: &str,
    t: f64,
    dropout_p: f64,
    seed: u64,
) -> Result<InteractionSample> {
    let subject = event
        .track(subject_id)
        .ok_or_else(|| GssmError::Feature(format!("event {}: unknown agent {subject_id}", event.event_id)))?;
    let object = event
        .track(object_id)
        .ok_or_else(|| GssmError::Feature(format!("event {}: unknown agent {object_id}", event.event_id)))?;
    let (Some(fi), Some(fj)) = (subject.frame_at(t), object.frame_at(t)) else {
        return Err(GssmError::Feature(format!(
            "event {}: pair {subject_id}/{object_id} not observed at t = {t}",
            event.event_id
        )));
    };
    let (s, current) = current_features(fi, fj, (subject.length, subject.width), (object.length, object.width));

    let k0 = grid_index(t);
    let mut newest_first: Vec<[f64; HISTORY_CHANNELS]> = Vec::with_capacity(HISTORY_STEPS);
    let mut valid_steps = 0;
    let mut padding = false;
    for back in 1..=HISTORY_STEPS as i64 {
        let time = grid_time(k0 - back);
        let pair = subject.frame_at(time).zip(object.frame_at(time));
        match pair {
            Some((a, b)) if !padding => {
                let local = local_velocity(a, b);
                newest_first.push([a.yaw_rate, a.speed, local[0], local[1]]);
                valid_steps += 1;
            }
            _ => {
                padding = true;
                let fill = newest_first.last().copied().unwrap_or_else(|| {
                    let local = local_velocity(fi, fj);
                    [fi.yaw_rate, fi.speed, local[0], local[1]]
                });
                newest_first.push(fill);
            }
        }
    }
    let mut values: Vec<_> = newest_first.into_iter().rev().collect();
    let mask = dropout_mask(dropout_p, seed);
    for (row, m) in values.iter_mut().zip(&mask) {
        for (v, &dropped) in row.iter_mut().zip(m) {
            if dropped {
                *v = 0.0;
            }
        }
    }
    Ok(InteractionSample {
        event_id: event.event_id.clone(),
        subject_id: subject_id.to_owned(),
        object_id: object_id.to_owned(),
        time: grid_time(k0),
        s,
        current,
        environment: encode_environment(&event.environment),
        history: HistoryFeatures { values, mask, valid_steps },
    })
}

/// Inference-mode samples at every step where both agents are observed.
pub fn pair_samples(event: &Event, subject_id: &str, object_id: &str) -> Vec<InteractionSample> {
    let Some(object) = event.track(object_id) else { return Vec::new() };
    object
        .frames
        .iter()
        .filter_map(|f| extract_features(event, subject_id, object_id, f.time, 0.0, 0).ok())
        .collect()
}

/// Writes samples as JSON lines.
pub fn write_jsonl(path: &std::path::Path, samples: &[InteractionSample]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sample in samples {
        serde_json::to_writer(&mut out, sample)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<InteractionSample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(GssmError::from))
        .collect()
}
