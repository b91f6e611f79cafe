//! Extended Kalman filters for bird's-eye-view trajectory reconstruction.
//!
//! Input events are *raw* recordings on the 0.1 s grid (see
//! [`crate::data::load_event_raw`]):
//!
//! - subject rows carry `speed` (NaN when missing), `yaw_rate` and `accel`;
//!   their positions and heading are ignored.
//! - object rows carry the detected nearest-edge position `x, y` in the subject
//!   body frame (x forward, y left) and the relative velocity as polar
//!   `speed, heading` in the same frame, i.e. the time derivative of the
//!   body-frame position.
//!
//! The subject follows a constant yaw-rate and acceleration model, objects a
//! constant heading and speed model.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_angle, AgentTrack, Event, Role, TrajectoryFrame};
use crate::error::{GssmError, Result};

pub const DEFAULT_EPSILON: f64 = 0.001;
pub const DEFAULT_DT: f64 = 0.1;
/// Length of the head and tail windows inspected for missing speed.
pub const END_WINDOW: f64 = 0.5;

type Vec6 = SVector<f64, 6>;
type Mat6 = SMatrix<f64, 6, 6>;
type Vec4 = SVector<f64, 4>;
type Mat4 = SMatrix<f64, 4, 4>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
    pub omega: f64,
    pub a: f64,
}

impl SubjectState {
    fn to_vector(self) -> Vec6 {
        Vec6::new(self.x, self.y, self.psi, self.v, self.omega, self.a)
    }

    fn from_vector(s: &Vec6) -> Self {
        Self { x: s[0], y: s[1], psi: s[2], v: s[3], omega: s[4], a: s[5] }
    }

    fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

impl ObjectState {
    fn to_vector(self) -> Vec4 {
        Vec4::new(self.x, self.y, self.psi, self.v)
    }

    fn from_vector(s: &Vec4) -> Self {
        Self { x: s[0], y: s[1], psi: s[2], v: s[3] }
    }
}

/// Motion ranges enforced by clamping after each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionBounds {
    pub speed: (f64, f64),
    pub yaw_rate: (f64, f64),
    pub accel: (f64, f64),
}

impl Default for MotionBounds {
    fn default() -> Self {
        Self { speed: (0.0, 70.0), yaw_rate: (-2.0, 2.0), accel: (-15.0, 15.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfParams {
    /// Per-step variances of `[x, y, ψ, v, ω, a]`.
    pub subject_process: [f64; 6],
    /// Variances of the speed, yaw-rate and acceleration channels.
    pub subject_measurement: [f64; 3],
    /// Per-step variances of `[x, y, ψ, v]`.
    pub object_process: [f64; 4],
    /// Variances of the centroid `x, y` and speed channels.
    pub object_measurement: [f64; 3],
    pub epsilon: f64,
    pub dt: f64,
    pub bounds: MotionBounds,
}

impl Default for EkfParams {
    fn default() -> Self {
        Self {
            subject_process: [1e-4, 1e-4, 1e-5, 1e-3, 1e-4, 1e-2],
            subject_measurement: [1e-3, 1e-5, 1e-2],
            object_process: [1e-2, 1e-2, 1e-3, 5e-2],
            object_measurement: [4e-2, 4e-2, 1e-2],
            epsilon: DEFAULT_EPSILON,
            dt: DEFAULT_DT,
            bounds: MotionBounds::default(),
        }
    }
}

impl EkfParams {
    pub fn validate(&self) -> Result<()> {
        let variances = self
            .subject_process
            .iter()
            .chain(&self.subject_measurement)
            .chain(&self.object_process)
            .chain(&self.object_measurement);
        for v in variances {
            if !(v.is_finite() && *v > 0.0) {
                return Err(GssmError::Config(format!("EKF variances must be positive, got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(GssmError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if (self.dt - DEFAULT_DT).abs() > 1e-12 {
            return Err(GssmError::Config(format!("dt must be {DEFAULT_DT}, got {}", self.dt)));
        }
        let b = self.bounds;
        for (lo, hi) in [b.speed, b.yaw_rate, b.accel] {
            if !(lo < hi) {
                return Err(GssmError::Config(format!("empty motion range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Copy with the measurement variances multiplied by `factor`.
    pub fn scale_measurement(mut self, factor: f64) -> Self {
        self.subject_measurement.iter_mut().for_each(|v| *v *= factor);
        self.object_measurement.iter_mut().for_each(|v| *v *= factor);
        self
    }

    /// Copy with the process variances multiplied by `factor`.
    pub fn scale_process(mut self, factor: f64) -> Self {
        self.subject_process.iter_mut().for_each(|v| *v *= factor);
        self.object_process.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

/// Position increment over `dt` and its Jacobian rows for `x` and `y`
/// with respect to `[ψ, v, ω, a]`.
fn subject_increment(s: &SubjectState, dt: f64, epsilon: f64) -> ([f64; 2], [[f64; 4]; 2]) {
    let (psi, v, w, a) = (s.psi, s.v, s.omega, s.a);
    if w.abs() <= epsilon {
        let phi = psi + 0.5 * w * dt;
        let (sp, cp) = phi.sin_cos();
        let len = v * dt + 0.5 * a * dt * dt;
        let dx = cp * len;
        let dy = sp * len;
        let jx = [-sp * len, cp * dt, -sp * len * 0.5 * dt, cp * 0.5 * dt * dt];
        let jy = [cp * len, sp * dt, cp * len * 0.5 * dt, sp * 0.5 * dt * dt];
        return ([dx, dy], [jx, jy]);
    }
    let theta = psi + w * dt;
    let (s0, c0) = psi.sin_cos();
    let (s1, c1) = theta.sin_cos();
    let wdt = w * dt;
    let n = (v * w + a * wdt) * s1 - v * w * s0 + a * (c1 - c0);
    let n2 = -(v * w + a * wdt) * c1 + v * w * c0 + a * (s1 - s0);
    let w2 = w * w;
    let dx = n / w2;
    let dy = n2 / w2;
    let n_w = v * (s1 - s0) + v * wdt * c1 + a * wdt * dt * c1;
    let n2_w = v * (c0 - c1) + v * wdt * s1 + a * wdt * dt * s1;
    let jx = [-dy, (s1 - s0) / w, n_w / w2 - 2.0 * n / (w2 * w), ((c1 - c0) + wdt * s1) / w2];
    let jy = [dx, (c0 - c1) / w, n2_w / w2 - 2.0 * n2 / (w2 * w), ((s1 - s0) - wdt * c1) / w2];
    ([dx, dy], [jx, jy])
}

fn propagate_subject(s: &SubjectState, dt: f64, epsilon: f64) -> (SubjectState, Mat6) {
    let ([dx, dy], [jx, jy]) = subject_increment(s, dt, epsilon);
    let next = SubjectState {
        x: s.x + dx,
        y: s.y + dy,
        psi: normalize_angle(s.psi + s.omega * dt),
        v: s.v + s.a * dt,
        omega: s.omega,
        a: s.a,
    };
    let mut f = Mat6::identity();
    for (row, j) in [(0, jx), (1, jy)] {
        f[(row, 2)] += j[0];
        f[(row, 3)] += j[1];
        f[(row, 4)] += j[2];
        f[(row, 5)] += j[3];
    }
    f[(2, 4)] = dt;
    f[(3, 5)] = dt;
    (next, f)
}

/// Propagates the subject state by `dt` under constant yaw rate and acceleration.
///
/// The straight branch (|ω| ≤ ε) advances along the mid-interval heading.
pub fn predict_subject(state: SubjectState, dt: f64, epsilon: f64) -> Result<SubjectState> {
    if !state.is_finite() || !dt.is_finite() || !epsilon.is_finite() {
        return Err(GssmError::Numeric(format!("non-finite subject prediction input {state:?}, dt {dt}")));
    }
    if !(dt > 0.0) {
        return Err(GssmError::Argument(format!("dt must be positive, got {dt}")));
    }
    Ok(propagate_subject(&state, dt, epsilon).0)
}

/// Jacobian of [`predict_subject`] with respect to `[x, y, ψ, v, ω, a]`.
pub fn subject_jacobian(state: SubjectState, dt: f64, epsilon: f64) -> [[f64; 6]; 6] {
    let f = propagate_subject(&state, dt, epsilon).1;
    std::array::from_fn(|r| std::array::from_fn(|c| f[(r, c)]))
}

fn propagate_object(s: &ObjectState, dt: f64) -> (ObjectState, Mat4) {
    let (sp, cp) = s.psi.sin_cos();
    let next = ObjectState { x: s.x + cp * s.v * dt, y: s.y + sp * s.v * dt, psi: s.psi, v: s.v };
    let mut f = Mat4::identity();
    f[(0, 2)] = -sp * s.v * dt;
    f[(0, 3)] = cp * dt;
    f[(1, 2)] = cp * s.v * dt;
    f[(1, 3)] = sp * dt;
    (next, f)
}

/// Propagates an object state by `dt` under constant heading and speed.
pub fn predict_object(state: ObjectState, dt: f64) -> Result<ObjectState> {
    if !state.to_vector().iter().all(|v| v.is_finite()) || !dt.is_finite() {
        return Err(GssmError::Numeric(format!("non-finite object prediction input {state:?}, dt {dt}")));
    }
    if !(dt > 0.0) {
        return Err(GssmError::Argument(format!("dt must be positive, got {dt}")));
    }
    Ok(propagate_object(&state, dt).0)
}

/// Jacobian of [`predict_object`] with respect to `[x, y, ψ, v]`.
pub fn object_jacobian(state: ObjectState, dt: f64) -> [[f64; 4]; 4] {
    let f = propagate_object(&state, dt).1;
    std::array::from_fn(|r| std::array::from_fn(|c| f[(r, c)]))
}

/// Scalar update of state component `index`; returns the innovation.
fn scalar_update<const N: usize>(
    x: &mut SVector<f64, N>,
    p: &mut SMatrix<f64, N, N>,
    index: usize,
    z: f64,
    r: f64,
    angular: bool,
) -> f64 {
    let mut innovation = z - x[index];
    if angular {
        innovation = normalize_angle(innovation);
    }
    let s = p[(index, index)] + r;
    let k: SVector<f64, N> = p.column(index) / s;
    *x += k * innovation;
    let row = p.row(index).into_owned();
    *p -= k * row;
    *p = (*p + p.transpose()) * 0.5;
    innovation
}

/// One frame of subject measurements; missing channels are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectMeasurement {
    pub speed: Option<f64>,
    pub yaw_rate: Option<f64>,
    pub accel: Option<f64>,
}

impl SubjectMeasurement {
    fn from_frame(f: &TrajectoryFrame) -> Self {
        let valid = |v: f64| v.is_finite().then_some(v);
        Self { speed: valid(f.speed), yaw_rate: valid(f.yaw_rate), accel: f.accel.and_then(valid) }
    }

    fn channels(&self) -> [(usize, Option<f64>); 3] {
        [(3, self.speed), (4, self.yaw_rate), (5, self.accel)]
    }
}

/// Running sums of one-step-ahead prediction residuals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Residuals {
    sum: [f64; 5],
    count: [usize; 5],
}

impl Residuals {
    fn add(&mut self, metric: usize, value: f64) {
        self.sum[metric] += value;
        self.count[metric] += 1;
    }

    fn merge(&mut self, other: &Residuals) {
        for i in 0..5 {
            self.sum[i] += other.sum[i];
            self.count[i] += other.count[i];
        }
    }
}

const SUBJECT_SPEED: usize = 0;
const SUBJECT_YAW: usize = 1;
const SUBJECT_ACCEL: usize = 2;
const OBJECT_SPEED: usize = 3;
const OBJECT_DISPLACEMENT: usize = 4;

fn clamp_subject(x: &mut Vec6, bounds: &MotionBounds) {
    x[2] = normalize_angle(x[2]);
    x[3] = x[3].clamp(bounds.speed.0, bounds.speed.1);
    x[4] = x[4].clamp(bounds.yaw_rate.0, bounds.yaw_rate.1);
    x[5] = x[5].clamp(bounds.accel.0, bounds.accel.1);
}

fn subject_step(
    x: &mut Vec6,
    p: &mut Mat6,
    dt: f64,
    meas: &SubjectMeasurement,
    params: &EkfParams,
    residuals: &mut Residuals,
) {
    let (next, f) = propagate_subject(&SubjectState::from_vector(x), dt, params.epsilon);
    *x = next.to_vector();
    *p = f * *p * f.transpose() + Mat6::from_diagonal(&Vec6::from(params.subject_process));
    for (metric, (index, z)) in meas.channels().into_iter().enumerate() {
        if let Some(z) = z {
            let innovation = scalar_update(x, p, index, z, params.subject_measurement[metric], false);
            residuals.add(metric, innovation * innovation);
        }
    }
    clamp_subject(x, &params.bounds);
}

/// Filters outward in both directions from `anchor`, returning one state per frame.
fn run_subject(meas: &[SubjectMeasurement], anchor: usize, params: &EkfParams) -> (Vec<SubjectState>, Residuals) {
    let m = meas[anchor];
    let mut x0 = Vec6::new(0.0, 0.0, 0.0, m.speed.unwrap_or(0.0), m.yaw_rate.unwrap_or(0.0), m.accel.unwrap_or(0.0));
    clamp_subject(&mut x0, &params.bounds);
    let sp = params.subject_process;
    let sm = params.subject_measurement;
    let p0 = Mat6::from_diagonal(&Vec6::new(sp[0], sp[1], sp[2], sm[0], sm[1], sm[2]));
    let mut states = vec![SubjectState::from_vector(&x0); meas.len()];
    let mut residuals = Residuals::default();
    let (mut x, mut p) = (x0, p0);
    for k in anchor + 1..meas.len() {
        subject_step(&mut x, &mut p, params.dt, &meas[k], params, &mut residuals);
        states[k] = SubjectState::from_vector(&x);
    }
    let (mut x, mut p) = (x0, p0);
    for k in (0..anchor).rev() {
        subject_step(&mut x, &mut p, -params.dt, &meas[k], params, &mut residuals);
        states[k] = SubjectState::from_vector(&x);
    }
    (states, residuals)
}

/// Rigidly moves the trajectory so that its first pose is `(0, 0)` heading along x.
fn reanchor(states: &mut [SubjectState]) {
    let Some(first) = states.first().copied() else { return };
    let (s, c) = (-first.psi).sin_cos();
    for st in states.iter_mut() {
        let (dx, dy) = (st.x - first.x, st.y - first.y);
        st.x = c * dx - s * dy;
        st.y = s * dx + c * dy;
        st.psi = normalize_angle(st.psi - first.psi);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Root-mean-square deviation of reconstructed speed and yaw rate from the
/// provided signals.
pub fn signal_deviation(states: &[SubjectState], meas: &[SubjectMeasurement]) -> (f64, f64) {
    let rmse = |pairs: Vec<(f64, f64)>| {
        if pairs.is_empty() {
            0.0
        } else {
            (pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt()
        }
    };
    let speed = states.iter().zip(meas).filter_map(|(s, m)| m.speed.map(|z| (s.v, z))).collect();
    let yaw = states.iter().zip(meas).filter_map(|(s, m)| m.yaw_rate.map(|z| (s.omega, z))).collect();
    (rmse(speed), rmse(yaw))
}

/// Keeps the run whose combined speed and yaw-rate deviation is smaller; ties go forward.
pub fn pick_direction(forward: (f64, f64), backward: (f64, f64)) -> Direction {
    if backward.0 + backward.1 < forward.0 + forward.1 {
        Direction::Backward
    } else {
        Direction::Forward
    }
}

fn check_uniform(track: &AgentTrack, dt: f64) -> Result<()> {
    for pair in track.frames.windows(2) {
        if ((pair[1].time - pair[0].time) - dt).abs() > 1e-6 {
            return Err(GssmError::Reconstruction(format!(
                "agent {}: frames must be spaced {dt} s apart, gap at t = {}",
                track.agent_id, pair[0].time
            )));
        }
    }
    Ok(())
}

struct SubjectRun {
    states: Vec<SubjectState>,
    residuals: Residuals,
    direction: Direction,
}

fn reconstruct_subject_run(track: &AgentTrack, params: &EkfParams) -> Result<SubjectRun> {
    params.validate()?;
    if track.frames.is_empty() {
        return Err(GssmError::Reconstruction(format!("agent {}: empty track", track.agent_id)));
    }
    check_uniform(track, params.dt)?;
    let meas: Vec<SubjectMeasurement> = track.frames.iter().map(SubjectMeasurement::from_frame).collect();
    let valid: Vec<usize> = (0..meas.len()).filter(|&k| meas[k].speed.is_some()).collect();
    let (Some(&first), Some(&last)) = (valid.first(), valid.last()) else {
        return Err(GssmError::Reconstruction(format!(
            "agent {}: no valid speed measurement",
            track.agent_id
        )));
    };
    let t0 = track.frames[0].time;
    let t1 = track.frames[meas.len() - 1].time;
    let head = track.frames[first].time - t0 < END_WINDOW - 1e-9;
    let tail = t1 - track.frames[last].time < END_WINDOW - 1e-9;
    let direction_run = |direction| {
        let anchor = if direction == Direction::Forward { first } else { last };
        let (mut states, residuals) = run_subject(&meas, anchor, params);
        reanchor(&mut states);
        SubjectRun { states, residuals, direction }
    };
    let run = match (head, tail) {
        (false, true) => direction_run(Direction::Backward),
        (true, true) => {
            let fwd = direction_run(Direction::Forward);
            let bwd = direction_run(Direction::Backward);
            match pick_direction(signal_deviation(&fwd.states, &meas), signal_deviation(&bwd.states, &meas)) {
                Direction::Forward => fwd,
                Direction::Backward => bwd,
            }
        }
        _ => direction_run(Direction::Forward),
    };
    if run.states.iter().any(|s| !s.is_finite()) {
        return Err(GssmError::Reconstruction(format!("agent {}: filter diverged", track.agent_id)));
    }
    Ok(run)
}

/// Reconstructs the subject trajectory from speed, yaw-rate and acceleration
/// signals, starting at `(0, 0)` with heading 0.
pub fn reconstruct_subject(track: &AgentTrack, params: &EkfParams) -> Result<AgentTrack> {
    let run = reconstruct_subject_run(track, params)?;
    Ok(subject_track(track, &run.states))
}

/// Direction chosen by [`reconstruct_subject`].
pub fn subject_direction(track: &AgentTrack, params: &EkfParams) -> Result<Direction> {
    Ok(reconstruct_subject_run(track, params)?.direction)
}

fn subject_track(track: &AgentTrack, states: &[SubjectState]) -> AgentTrack {
    let frames = track
        .frames
        .iter()
        .zip(states)
        .map(|(f, s)| TrajectoryFrame {
            time: f.time,
            x: s.x,
            y: s.y,
            heading: s.psi,
            speed: s.v,
            yaw_rate: s.omega,
            accel: Some(s.a),
        })
        .collect();
    AgentTrack { frames, ..track.clone() }
}

/// Global detection of an object at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectObservation {
    pub time: f64,
    pub centroid: [f64; 2],
    pub heading: f64,
    pub speed: f64,
}

/// Centroid from the detected nearest edge.
///
/// The rear is seen when the heading points away from the subject, in which
/// case the centroid lies half a length ahead of the edge; otherwise behind it.
pub fn centroid_from_edge(edge: [f64; 2], heading: f64, length: f64, subject: [f64; 2]) -> [f64; 2] {
    let u = [heading.cos(), heading.sin()];
    let away = u[0] * (edge[0] - subject[0]) + u[1] * (edge[1] - subject[1]) >= 0.0;
    let sign = if away { 0.5 } else { -0.5 };
    [edge[0] + sign * length * u[0], edge[1] + sign * length * u[1]]
}

/// Speeds below this use the line of sight as heading for the edge correction.
const STATIONARY_SPEED: f64 = 0.1;

/// Converts a radar detection in the subject frame into global coordinates.
pub fn observe_object(frame: &TrajectoryFrame, subject: &TrajectoryFrame, length: f64) -> ObjectObservation {
    let (s, c) = subject.heading.sin_cos();
    let rotate = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
    let local = [frame.x, frame.y];
    let offset = rotate(local);
    let edge = [subject.x + offset[0], subject.y + offset[1]];
    let rel = [frame.speed * frame.heading.cos(), frame.speed * frame.heading.sin()];
    let w = subject.yaw_rate;
    let body = rotate([rel[0] - w * local[1], rel[1] + w * local[0]]);
    let vel = [subject.speed * c + body[0], subject.speed * s + body[1]];
    let speed = vel[0].hypot(vel[1]);
    let heading = if speed > STATIONARY_SPEED { vel[1].atan2(vel[0]) } else { offset[1].atan2(offset[0]) };
    let centroid = centroid_from_edge(edge, heading, length, [subject.x, subject.y]);
    ObjectObservation { time: frame.time, centroid, heading, speed }
}

fn object_run(obs: &[ObjectObservation], params: &EkfParams) -> (Vec<ObjectState>, Residuals) {
    let om = params.object_measurement;
    let op = params.object_process;
    let mut x = Vec4::new(obs[0].centroid[0], obs[0].centroid[1], obs[0].heading, obs[0].speed);
    let mut p = Mat4::from_diagonal(&Vec4::new(om[0], om[1], op[2].max(1e-2), om[2]));
    let q = Mat4::from_diagonal(&Vec4::from(op));
    let mut states = vec![ObjectState::from_vector(&x)];
    let mut residuals = Residuals::default();
    for pair in obs.windows(2) {
        let steps = ((pair[1].time - pair[0].time) / params.dt).round().max(1.0) as usize;
        for _ in 0..steps {
            let (next, f) = propagate_object(&ObjectState::from_vector(&x), params.dt);
            x = next.to_vector();
            p = f * p * f.transpose() + q;
        }
        let z = pair[1];
        let ex = scalar_update(&mut x, &mut p, 0, z.centroid[0], om[0], false);
        let ey = scalar_update(&mut x, &mut p, 1, z.centroid[1], om[1], false);
        let ev = scalar_update(&mut x, &mut p, 3, z.speed, om[2], false);
        residuals.add(OBJECT_DISPLACEMENT, ex.hypot(ey));
        residuals.add(OBJECT_SPEED, ev * ev);
        x[2] = normalize_angle(x[2]);
        x[3] = x[3].clamp(params.bounds.speed.0, params.bounds.speed.1);
        states.push(ObjectState::from_vector(&x));
    }
    (states, residuals)
}

fn object_observations(track: &AgentTrack, subject: &AgentTrack) -> Result<Vec<ObjectObservation>> {
    if track.frames.len() < 2 {
        return Err(GssmError::Reconstruction(format!(
            "object {}: observed in {} frame(s), need at least 2",
            track.agent_id,
            track.frames.len()
        )));
    }
    track
        .frames
        .iter()
        .map(|f| {
            let s = subject.frame_at(f.time).ok_or_else(|| {
                GssmError::Reconstruction(format!(
                    "object {}: no subject state at t = {}",
                    track.agent_id, f.time
                ))
            })?;
            if ![f.x, f.y, f.speed, f.heading].iter().all(|v| v.is_finite()) {
                return Err(GssmError::Reconstruction(format!(
                    "object {}: non-finite detection at t = {}",
                    track.agent_id, f.time
                )));
            }
            Ok(observe_object(f, s, track.length))
        })
        .collect()
}

fn object_track(track: &AgentTrack, obs: &[ObjectObservation], states: &[ObjectState]) -> AgentTrack {
    let n = states.len();
    let frames = (0..n)
        .map(|k| {
            let (lo, hi) = (k.saturating_sub(1), (k + 1).min(n - 1));
            let span = obs[hi].time - obs[lo].time;
            let yaw_rate = if span > 0.0 { normalize_angle(states[hi].psi - states[lo].psi) / span } else { 0.0 };
            TrajectoryFrame {
                time: obs[k].time,
                x: states[k].x,
                y: states[k].y,
                heading: states[k].psi,
                speed: states[k].v,
                yaw_rate,
                accel: None,
            }
        })
        .collect();
    AgentTrack { frames, ..track.clone() }
}

/// Reconstructs an object's global centroid trajectory from radar detections
/// relative to an already reconstructed subject.
pub fn reconstruct_object(track: &AgentTrack, subject: &AgentTrack, params: &EkfParams) -> Result<AgentTrack> {
    params.validate()?;
    let obs = object_observations(track, subject)?;
    let (states, _) = object_run(&obs, params);
    if states.iter().any(|s| !s.to_vector().iter().all(|v| v.is_finite())) {
        return Err(GssmError::Reconstruction(format!("object {}: filter diverged", track.agent_id)));
    }
    Ok(object_track(track, &obs, &states))
}

fn reconstruct_with_residuals(event: &Event, params: &EkfParams) -> Result<(Event, Residuals)> {
    let raw_subject = event.tracks.iter().find(|t| t.role == Role::Subject).ok_or_else(|| {
        GssmError::Structure(format!("event {}: no subject track", event.event_id))
    })?;
    let run = reconstruct_subject_run(raw_subject, params)?;
    let subject = subject_track(raw_subject, &run.states);
    let mut residuals = run.residuals;
    let mut tracks = vec![subject.clone()];
    for track in event.tracks.iter().filter(|t| t.role == Role::Object) {
        if track.frames.len() < 2 {
            continue;
        }
        let obs = object_observations(track, &subject)?;
        let (states, r) = object_run(&obs, params);
        residuals.merge(&r);
        tracks.push(object_track(track, &obs, &states));
    }
    let out = Event { tracks, ..event.clone() };
    out.validate()
        .map_err(|e| GssmError::Reconstruction(format!("event {}: {e}", event.event_id)))?;
    Ok((out, residuals))
}

/// Reconstructs every track of a raw event. Objects seen in fewer than two
/// frames are dropped.
pub fn reconstruct_event(event: &Event, params: &EkfParams) -> Result<Event> {
    Ok(reconstruct_with_residuals(event, params)?.0)
}

/// One-step-ahead prediction errors against the provided signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionErrors {
    pub subject_speed_rmse: f64,
    pub subject_yaw_rate_rmse: f64,
    pub subject_accel_rmse: f64,
    pub object_speed_rmse: f64,
    pub object_displacement_mae: f64,
}

impl ReconstructionErrors {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.subject_speed_rmse,
            self.subject_yaw_rate_rmse,
            self.subject_accel_rmse,
            self.object_speed_rmse,
            self.object_displacement_mae,
        ]
    }
}

/// Reconstruction errors of `params` pooled over `events`.
pub fn reconstruction_errors(events: &[Event], params: &EkfParams) -> Result<ReconstructionErrors> {
    if events.is_empty() {
        return Err(GssmError::Argument("no events to evaluate".into()));
    }
    let mut total = Residuals::default();
    for event in events {
        total.merge(&reconstruct_with_residuals(event, params)?.1);
    }
    let mean = |i: usize| if total.count[i] == 0 { 0.0 } else { total.sum[i] / total.count[i] as f64 };
    Ok(ReconstructionErrors {
        subject_speed_rmse: mean(SUBJECT_SPEED).sqrt(),
        subject_yaw_rate_rmse: mean(SUBJECT_YAW).sqrt(),
        subject_accel_rmse: mean(SUBJECT_ACCEL).sqrt(),
        object_speed_rmse: mean(OBJECT_SPEED).sqrt(),
        object_displacement_mae: mean(OBJECT_DISPLACEMENT),
    })
}

/// Index of the candidate with the smallest sum of errors, each metric divided
/// by its mean over all candidates. Ties go to the earliest candidate.
pub fn select_candidate(errors: &[ReconstructionErrors]) -> Option<usize> {
    let scale: Vec<f64> = (0..5)
        .map(|m| errors.iter().map(|e| e.as_array()[m]).sum::<f64>() / errors.len() as f64)
        .collect();
    let score = |e: &ReconstructionErrors| {
        e.as_array()
            .iter()
            .zip(&scale)
            .map(|(v, s)| if *s > 0.0 { v / s } else { 0.0 })
            .sum::<f64>()
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in errors.iter().enumerate() {
        let s = score(e);
        if best.is_none_or(|(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Grid search over EKF parameter candidates.
pub fn tune_ekf_params(events: &[Event], grid: &[EkfParams]) -> Result<EkfParams> {
    if grid.is_empty() {
        return Err(GssmError::Argument("empty EKF parameter grid".into()));
    }
    if events.is_empty() {
        return Err(GssmError::Argument("no events to tune on".into()));
    }
    if grid.len() == 1 {
        grid[0].validate()?;
        return Ok(grid[0]);
    }
    let errors = grid
        .iter()
        .map(|p| reconstruction_errors(events, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(grid[select_candidate(&errors).expect("nonempty grid")])
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{EnvironmentTags, EventAnnotations, EventType, Severity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const EPS: f64 = DEFAULT_EPSILON;

    fn state(x: f64, y: f64, psi: f64, v: f64, omega: f64, a: f64) -> SubjectState {
        SubjectState { x, y, psi, v, omega, a }
    }

    fn rk4(s: SubjectState, t: f64, h: f64) -> SubjectState {
        let deriv = |y: [f64; 4], a: f64, w: f64| [y[3] * y[2].cos(), y[3] * y[2].sin(), w, a];
        let mut y = [s.x, s.y, s.psi, s.v];
        let steps = (t / h).round() as usize;
        for _ in 0..steps {
            let add = |y: [f64; 4], k: [f64; 4], f: f64| std::array::from_fn::<f64, 4, _>(|i| y[i] + f * k[i]);
            let k1 = deriv(y, s.a, s.omega);
            let k2 = deriv(add(y, k1, h / 2.0), s.a, s.omega);
            let k3 = deriv(add(y, k2, h / 2.0), s.a, s.omega);
            let k4 = deriv(add(y, k3, h), s.a, s.omega);
            y = std::array::from_fn(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        }
        state(y[0], y[1], y[2], y[3], s.omega, s.a)
    }

    #[test]
    fn straight_and_constant_acceleration() {
        let s = predict_subject(state(0.0, 0.0, 0.0, 10.0, 0.0, 0.0), 0.1, EPS).unwrap();
        assert!((s.x - 1.0).abs() < 1e-12 && s.y.abs() < 1e-12);
        let mut s = state(0.0, 0.0, 0.0, 10.0, 0.0, 2.0);
        for _ in 0..10 {
            s = predict_subject(s, 0.1, EPS).unwrap();
        }
        assert!((s.x - 11.0).abs() < 1e-12 && s.y.abs() < 1e-12);
        assert!((s.v - 12.0).abs() < 1e-12);
    }

    #[test]
    fn curved_branch_matches_fine_step_integration() {
        let cases = [
            state(0.0, 0.0, 0.0, 10.0, 0.5, 0.0),
            state(3.0, -2.0, 2.8, 14.0, -0.3, 1.5),
            state(0.0, 0.0, -1.2, 4.0, 0.05, -3.0),
        ];
        for s in cases {
            let closed = predict_subject(s, 0.1, EPS).unwrap();
            let oracle = rk4(s, 0.1, 1e-5);
            let d = (closed.x - oracle.x).hypot(closed.y - oracle.y);
            assert!(d < 1e-6, "{s:?}: {d}");
            assert!((normalize_angle(closed.psi - oracle.psi)).abs() < 1e-9);
        }
    }

    #[test]
    fn branches_agree_at_threshold() {
        for &(psi, v, a) in &[(0.0, 10.0, 0.0), (1.0, 30.0, 3.0), (-2.5, 5.0, -4.0)] {
            for w in [EPS, -EPS] {
                let s = state(0.0, 0.0, psi, v, w, a);
                let (straight, _) = subject_increment(&s, 0.1, EPS);
                let (curved, _) = subject_increment(&s, 0.1, 0.0);
                let d = (straight[0] - curved[0]).hypot(straight[1] - curved[1]);
                assert!(d < 1e-6, "{psi} {v} {a} {w}: {d}");
            }
        }
    }

    fn check_jacobian<const N: usize>(analytic: [[f64; N]; N], f: impl Fn([f64; N]) -> [f64; N], x: [f64; N]) {
        let h = 1e-6;
        for c in 0..N {
            let mut up = x;
            let mut down = x;
            up[c] += h;
            down[c] -= h;
            let (fu, fd) = (f(up), f(down));
            for r in 0..N {
                let numeric = (fu[r] - fd[r]) / (2.0 * h);
                let a = analytic[r][c];
                if a.abs().max(numeric.abs()) < 1e-9 {
                    continue;
                }
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
                assert!(rel < 1e-6, "entry ({r},{c}): analytic {a}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let cases = [
            state(1.0, 2.0, 0.3, 12.0, 0.4, 1.0),
            state(-4.0, 0.5, -2.0, 7.0, -0.8, -2.0),
            state(0.0, 0.0, 0.7, 20.0, 0.0005, 0.8),
            state(0.0, 0.0, 2.0, 9.0, 0.0, -1.0),
        ];
        for s in cases {
            let eps = if s.omega.abs() <= EPS { 1.0 } else { 0.0 };
            let f = |x: [f64; 6]| {
                let n = propagate_subject(&state(x[0], x[1], x[2], x[3], x[4], x[5]), 0.1, eps).0;
                [n.x, n.y, s.psi + x[4] * 0.1 + (x[2] - s.psi), n.v, n.omega, n.a]
            };
            check_jacobian(subject_jacobian(s, 0.1, eps), f, [s.x, s.y, s.psi, s.v, s.omega, s.a]);
        }
        let o = ObjectState { x: 3.0, y: -1.0, psi: 2.2, v: 8.0 };
        let f = |x: [f64; 4]| {
            let n = predict_object(ObjectState { x: x[0], y: x[1], psi: x[2], v: x[3] }, 0.1).unwrap();
            [n.x, n.y, n.psi, n.v]
        };
        check_jacobian(object_jacobian(o, 0.1), f, [o.x, o.y, o.psi, o.v]);
    }

    #[test]
    fn prediction_rejects_bad_input() {
        let s = state(0.0, 0.0, 0.0, f64::NAN, 0.0, 0.0);
        assert!(matches!(predict_subject(s, 0.1, EPS), Err(GssmError::Numeric(_))));
        let s = state(0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        assert!(matches!(predict_subject(s, 0.0, EPS), Err(GssmError::Argument(_))));
    }

    #[test]
    fn params_validation() {
        assert!(EkfParams::default().validate().is_ok());
        let mut p = EkfParams::default();
        p.subject_measurement[1] = 0.0;
        assert!(p.validate().is_err());
        let p = EkfParams { dt: 0.2, ..EkfParams::default() };
        assert!(p.validate().is_err());
        let p = EkfParams { epsilon: 0.0, ..EkfParams::default() };
        assert!(p.validate().is_err());
    }

    /// Ground-truth subject and object motion plus raw detections.
    pub(crate) struct Scenario {
        pub subject: Vec<SubjectState>,
        pub objects: Vec<Vec<ObjectState>>,
        pub event: Event,
    }

    #[derive(Clone, Copy)]
    pub(crate) struct NoiseSpec {
        pub subject_process: [f64; 6],
        pub object_process: [f64; 4],
        /// Standard deviations of speed, yaw rate and acceleration.
        pub subject_sd: [f64; 3],
        /// Standard deviations of detected position and relative speed components.
        pub object_sd: [f64; 2],
    }

    impl NoiseSpec {
        pub(crate) fn zero() -> Self {
            Self { subject_process: [0.0; 6], object_process: [0.0; 4], subject_sd: [0.0; 3], object_sd: [0.0; 2] }
        }
    }

    fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
        if sd == 0.0 {
            0.0
        } else {
            Normal::new(0.0, sd).unwrap().sample(rng)
        }
    }

    fn raw_event(id: &str, tracks: Vec<AgentTrack>) -> Event {
        Event {
            event_id: id.into(),
            severity: Severity::Baseline,
            tracks,
            environment: EnvironmentTags::default(),
            annotations: EventAnnotations {
                start_time: None,
                impact_time: None,
                end_time: None,
                reaction_time: None,
                event_type: EventType::Other,
            },
        }
    }

    /// Local radar detection of an object centroid `c` moving with `vel`.
    fn detect(subject: &SubjectState, c: [f64; 2], psi_j: f64, v_j: f64, length: f64) -> ([f64; 2], [f64; 2]) {
        let u = [psi_j.cos(), psi_j.sin()];
        let rear = [c[0] - 0.5 * length * u[0], c[1] - 0.5 * length * u[1]];
        let front = [c[0] + 0.5 * length * u[0], c[1] + 0.5 * length * u[1]];
        let dist = |p: [f64; 2]| (p[0] - subject.x).hypot(p[1] - subject.y);
        let edge = if dist(rear) <= dist(front) { rear } else { front };
        let (s, co) = subject.psi.sin_cos();
        let d = [edge[0] - subject.x, edge[1] - subject.y];
        let local = [co * d[0] + s * d[1], -s * d[0] + co * d[1]];
        let dv = [v_j * u[0] - subject.v * subject.psi.cos(), v_j * u[1] - subject.v * subject.psi.sin()];
        let rel_body = [co * dv[0] + s * dv[1], -s * dv[0] + co * dv[1]];
        let w = subject.omega;
        (local, [rel_body[0] + w * local[1], rel_body[1] - w * local[0]])
    }

    pub(crate) fn scenario(seed: u64, frames: usize, n_objects: usize, noise: NoiseSpec, omega: f64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = state(0.0, 0.0, 0.0, 14.0, omega, 0.3);
        let mut subject = Vec::with_capacity(frames);
        for k in 0..frames {
            if k > 0 {
                s = propagate_subject(&s, DEFAULT_DT, EPS).0;
                s.x += gauss(&mut rng, noise.subject_process[0].sqrt());
                s.y += gauss(&mut rng, noise.subject_process[1].sqrt());
                s.psi = normalize_angle(s.psi + gauss(&mut rng, noise.subject_process[2].sqrt()));
                s.v += gauss(&mut rng, noise.subject_process[3].sqrt());
                s.omega += gauss(&mut rng, noise.subject_process[4].sqrt());
                s.a += gauss(&mut rng, noise.subject_process[5].sqrt());
                s.a = s.a.clamp(-1.0, 1.0);
                s.omega = s.omega.clamp(-0.1, 0.1);
            }
            subject.push(s);
        }
        let subject_frames = subject
            .iter()
            .enumerate()
            .map(|(k, s)| TrajectoryFrame {
                time: k as f64 * DEFAULT_DT,
                x: 0.0,
                y: 0.0,
                heading: 0.0,
                speed: s.v + gauss(&mut rng, noise.subject_sd[0]),
                yaw_rate: s.omega + gauss(&mut rng, noise.subject_sd[1]),
                accel: Some(s.a + gauss(&mut rng, noise.subject_sd[2])),
            })
            .collect();
        let mut tracks = vec![AgentTrack {
            agent_id: "ego".into(),
            role: Role::Subject,
            length: 4.8,
            width: 1.9,
            frames: subject_frames,
        }];
        let mut objects = Vec::new();
        for j in 0..n_objects {
            let length = 4.0 + j as f64;
            let mut o = ObjectState { x: 25.0 + 10.0 * j as f64, y: 3.5 * j as f64, psi: 0.05 * j as f64, v: 18.0 + j as f64 };
            let mut states = Vec::with_capacity(frames);
            let mut raw = Vec::with_capacity(frames);
            for k in 0..frames {
                if k > 0 {
                    o = propagate_object(&o, DEFAULT_DT).0;
                    o.x += gauss(&mut rng, noise.object_process[0].sqrt());
                    o.y += gauss(&mut rng, noise.object_process[1].sqrt());
                    o.psi = normalize_angle(o.psi + gauss(&mut rng, noise.object_process[2].sqrt()));
                    o.v = (o.v + gauss(&mut rng, noise.object_process[3].sqrt())).max(0.5);
                }
                states.push(o);
                let (local, rel) = detect(&subject[k], [o.x, o.y], o.psi, o.v, length);
                let local = [local[0] + gauss(&mut rng, noise.object_sd[0]), local[1] + gauss(&mut rng, noise.object_sd[0])];
                let rel = [rel[0] + gauss(&mut rng, noise.object_sd[1]), rel[1] + gauss(&mut rng, noise.object_sd[1])];
                raw.push(TrajectoryFrame {
                    time: k as f64 * DEFAULT_DT,
                    x: local[0],
                    y: local[1],
                    heading: rel[1].atan2(rel[0]),
                    speed: rel[0].hypot(rel[1]),
                    yaw_rate: 0.0,
                    accel: None,
                });
            }
            objects.push(states);
            tracks.push(AgentTrack { agent_id: format!("obj{j}"), role: Role::Object, length, width: 1.8, frames: raw });
        }
        Scenario { subject, objects, event: raw_event(&format!("sim{seed}"), tracks) }
    }

    fn tight_params() -> EkfParams {
        EkfParams {
            subject_process: [1e-8; 6],
            subject_measurement: [1e-6; 3],
            object_process: [1e-8; 4],
            object_measurement: [1e-6; 3],
            ..EkfParams::default()
        }
    }

    fn position_rmse(track: &AgentTrack, truth: &[[f64; 2]]) -> f64 {
        let sum: f64 = track
            .frames
            .iter()
            .zip(truth)
            .map(|(f, t)| (f.x - t[0]).powi(2) + (f.y - t[1]).powi(2))
            .sum();
        (sum / truth.len() as f64).sqrt()
    }

    #[test]
    fn noise_free_constant_acceleration_is_recovered() {
        for omega in [0.0, 0.08] {
            let sc = scenario(1, 120, 0, NoiseSpec::zero(), omega);
            let rec = reconstruct_subject(sc.event.subject(), &tight_params()).unwrap();
            let truth: Vec<[f64; 2]> = sc.subject.iter().map(|s| [s.x, s.y]).collect();
            let rmse = position_rmse(&rec, &truth);
            assert!(rmse < 1e-6, "omega {omega}: {rmse}");
            if omega == 0.0 {
                let analytic = rec.frames.last().unwrap().time;
                let x = 14.0 * analytic + 0.5 * 0.3 * analytic * analytic;
                assert!((rec.frames.last().unwrap().x - x).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_measurement_noise_returns_measurements() {
        let noise = NoiseSpec { subject_sd: [0.05, 0.01, 0.1], ..NoiseSpec::zero() };
        let sc = scenario(2, 80, 0, noise, 0.02);
        let params = EkfParams { subject_measurement: [1e-14; 3], ..EkfParams::default() };
        let rec = reconstruct_subject(sc.event.subject(), &params).unwrap();
        for (r, m) in rec.frames.iter().zip(&sc.event.subject().frames) {
            assert!((r.speed - m.speed).abs() < 1e-6);
            assert!((r.yaw_rate - m.yaw_rate).abs() < 1e-6);
            assert!((r.accel.unwrap() - m.accel.unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_head_speed_is_filled_backwards() {
        let noise = NoiseSpec { subject_process: [0.0, 0.0, 0.0, 0.0, 1e-7, 1e-3], subject_sd: [0.05, 0.002, 0.05], ..NoiseSpec::zero() };
        let mut sc = scenario(3, 200, 0, noise, 0.01);
        let track = &mut sc.event.tracks[0];
        for f in track.frames.iter_mut().take(30) {
            f.speed = f64::NAN;
        }
        let params = EkfParams {
            subject_process: [1e-8, 1e-8, 1e-8, 1e-8, 1e-7, 1e-3],
            subject_measurement: [0.05f64.powi(2), 0.002f64.powi(2), 0.05f64.powi(2)],
            ..EkfParams::default()
        };
        assert_eq!(subject_direction(&sc.event.tracks[0], &params).unwrap(), Direction::Backward);
        let rec = reconstruct_subject(&sc.event.tracks[0], &params).unwrap();
        assert_eq!(rec.frames.len(), 200);
        assert!(rec.frames[0].x.abs() < 1e-12 && rec.frames[0].y.abs() < 1e-12 && rec.frames[0].heading.abs() < 1e-12);
        let err: f64 = rec.frames[30..].iter().zip(&sc.subject[30..]).map(|(r, t)| (r.speed - t.v).powi(2)).sum::<f64>() / 170.0;
        assert!(err.sqrt() < 0.05, "overlap speed rmse {}", err.sqrt());
        let head: f64 = rec.frames[..30].iter().zip(&sc.subject[..30]).map(|(r, t)| (r.speed - t.v).abs()).fold(0.0, f64::max);
        assert!(head < 0.3, "backfilled speed error {head}");
    }

    #[test]
    fn missing_tail_runs_forward() {
        let mut sc = scenario(4, 60, 0, NoiseSpec::zero(), 0.0);
        for f in sc.event.tracks[0].frames.iter_mut().skip(50) {
            f.speed = f64::NAN;
        }
        assert_eq!(subject_direction(&sc.event.tracks[0], &tight_params()).unwrap(), Direction::Forward);
    }

    #[test]
    fn direction_selection_rule() {
        assert_eq!(pick_direction((0.1, 0.02), (0.2, 0.02)), Direction::Forward);
        assert_eq!(pick_direction((0.2, 0.02), (0.1, 0.02)), Direction::Backward);
        assert_eq!(pick_direction((0.1, 0.0), (0.1, 0.0)), Direction::Forward);
    }

    #[test]
    fn no_speed_is_an_error() {
        let mut sc = scenario(5, 20, 0, NoiseSpec::zero(), 0.0);
        for f in sc.event.tracks[0].frames.iter_mut() {
            f.speed = f64::NAN;
        }
        assert!(matches!(reconstruct_subject(&sc.event.tracks[0], &tight_params()), Err(GssmError::Reconstruction(_))));
    }

    #[test]
    fn noise_free_object_is_recovered() {
        let sc = scenario(6, 100, 2, NoiseSpec::zero(), 0.05);
        let rec = reconstruct_event(&sc.event, &tight_params()).unwrap();
        for (j, truth) in sc.objects.iter().enumerate() {
            let track = rec.track(&format!("obj{j}")).unwrap();
            let pts: Vec<[f64; 2]> = truth.iter().map(|o| [o.x, o.y]).collect();
            let rmse = position_rmse(track, &pts);
            assert!(rmse < 1e-6, "object {j}: {rmse}");
        }
    }

    #[test]
    fn rear_edge_offset_is_half_length() {
        let heading: f64 = 0.4;
        let edge = [10.0 * heading.cos(), 10.0 * heading.sin()];
        let c = centroid_from_edge(edge, heading, 4.0, [0.0, 0.0]);
        assert!((c[0] - 12.0 * heading.cos()).abs() < 1e-12 && (c[1] - 12.0 * heading.sin()).abs() < 1e-12);
        let oncoming = centroid_from_edge(edge, heading + std::f64::consts::PI, 4.0, [0.0, 0.0]);
        assert!((oncoming[0] - 12.0 * heading.cos()).abs() < 1e-12);
    }

    #[test]
    fn object_filter_beats_raw_detections() {
        let params = EkfParams {
            subject_process: [1e-8; 6],
            subject_measurement: [1e-6; 3],
            object_process: [1e-6, 1e-6, 1e-6, 1e-4],
            object_measurement: [0.04, 0.04, 0.02],
            ..EkfParams::default()
        };
        let noise = NoiseSpec { object_sd: [0.2, 0.1], ..NoiseSpec::zero() };
        let (mut ekf, mut raw) = (0.0, 0.0);
        for seed in 0..100 {
            let sc = scenario(1000 + seed, 60, 1, noise, 0.02);
            let subject = reconstruct_subject(sc.event.subject(), &params).unwrap();
            let track = &sc.event.tracks[1];
            let rec = reconstruct_object(track, &subject, &params).unwrap();
            for (k, truth) in sc.objects[0].iter().enumerate() {
                let obs = observe_object(&track.frames[k], &subject.frames[k], track.length);
                raw += (obs.centroid[0] - truth.x).hypot(obs.centroid[1] - truth.y);
                ekf += (rec.frames[k].x - truth.x).hypot(rec.frames[k].y - truth.y);
            }
        }
        assert!(ekf < raw, "ekf {ekf}, raw {raw}");
    }

    #[test]
    fn short_object_is_an_error() {
        let sc = scenario(7, 30, 1, NoiseSpec::zero(), 0.0);
        let subject = reconstruct_subject(sc.event.subject(), &tight_params()).unwrap();
        let mut obj = sc.event.tracks[1].clone();
        obj.frames.truncate(1);
        assert!(matches!(reconstruct_object(&obj, &subject, &tight_params()), Err(GssmError::Reconstruction(_))));
    }

    fn errors(v: [f64; 5]) -> ReconstructionErrors {
        ReconstructionErrors {
            subject_speed_rmse: v[0],
            subject_yaw_rate_rmse: v[1],
            subject_accel_rmse: v[2],
            object_speed_rmse: v[3],
            object_displacement_mae: v[4],
        }
    }

    #[test]
    fn tuning_trivial_cases() {
        let sc = scenario(8, 30, 1, NoiseSpec::zero(), 0.0);
        let only = EkfParams::default().scale_process(3.0);
        assert_eq!(tune_ekf_params(std::slice::from_ref(&sc.event), &[only]).unwrap(), only);
        assert!(matches!(tune_ekf_params(&[], &[only]), Err(GssmError::Argument(_))));
        assert!(matches!(tune_ekf_params(std::slice::from_ref(&sc.event), &[]), Err(GssmError::Argument(_))));
        let worse = errors([0.2, 0.02, 0.3, 0.4, 0.5]);
        let better = errors([0.1, 0.01, 0.2, 0.3, 0.4]);
        assert_eq!(select_candidate(&[worse, better]), Some(1));
        assert_eq!(select_candidate(&[better, worse]), Some(0));
    }

    pub(crate) fn true_noise() -> (NoiseSpec, EkfParams) {
        let noise = NoiseSpec {
            subject_process: [1e-6, 1e-6, 1e-7, 1e-4, 1e-5, 1e-2],
            object_process: [1e-4, 1e-4, 1e-5, 1e-3],
            subject_sd: [0.05, 0.005, 0.1],
            object_sd: [0.2, 0.1],
        };
        let params = EkfParams {
            subject_process: noise.subject_process,
            subject_measurement: [0.05f64.powi(2), 0.005f64.powi(2), 0.1f64.powi(2)],
            object_process: noise.object_process,
            object_measurement: [0.04, 0.04, 0.01],
            ..EkfParams::default()
        };
        (noise, params)
    }

    #[test]
    fn tuned_measurement_noise_is_near_truth() {
        let (noise, truth) = true_noise();
        let events: Vec<Event> = (0..8).map(|s| scenario(200 + s, 300, 2, noise, 0.02).event).collect();
        let factors = [1.0 / 16.0, 0.25, 1.0, 4.0, 16.0];
        let grid: Vec<EkfParams> = factors.iter().map(|&f| truth.scale_measurement(f)).collect();
        let tuned = tune_ekf_params(&events, &grid).unwrap();
        let pos = grid.iter().position(|g| *g == tuned).unwrap();
        assert!((1..=3).contains(&pos), "tuned factor {}", factors[pos]);
    }

    #[test]
    fn error_decreases_as_process_noise_approaches_truth() {
        let (noise, truth) = true_noise();
        let events: Vec<Event> = (0..6).map(|s| scenario(300 + s, 300, 1, noise, 0.02).event).collect();
        for path in [[100.0, 10.0, 1.0], [0.01, 0.1, 1.0]] {
            let errs: Vec<ReconstructionErrors> = path
                .iter()
                .map(|&f| reconstruction_errors(&events, &truth.scale_process(f)).unwrap())
                .collect();
            let totals: Vec<f64> = errs
                .iter()
                .map(|e| e.as_array().iter().zip(errs[2].as_array()).map(|(a, b)| a / b).sum())
                .collect();
            for pair in totals.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "{path:?}: {totals:?}");
            }
        }
    }

    #[test]
    fn reconstructed_event_round_trips_through_csv() {
        let sc = scenario(9, 40, 1, NoiseSpec::zero(), 0.01);
        let rec = reconstruct_event(&sc.event, &tight_params()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.csv");
        crate::data::save_event(&rec, &path).unwrap();
        let back = crate::data::load_event(&path).unwrap();
        assert_eq!(back.tracks.len(), rec.tracks.len());
        for (a, b) in back.tracks.iter().zip(&rec.tracks) {
            assert_eq!(a.frames.len(), b.frames.len());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert!((fa.x - fb.x).abs() < 1e-12 && (fa.speed - fb.speed).abs() < 1e-12);
            }
        }
    }
}
