//! Event and trajectory data contract.
//!
//! An [`Event`] bundles one subject track, any number of object tracks, the
//! environment tags and the timing annotations of a recorded interaction.
//! Tracks are stored on a uniform 0.1 s grid after [`resample_track`].
//!
//! On disk an event is a pair of files sharing a stem: `<stem>.csv` holds the
//! trajectory rows and `<stem>.json` the metadata.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GssmError, Result};

/// Sampling interval of every resampled track, in seconds.
pub const DT: f64 = 0.1;

/// Object tracks with a detection gap longer than this are split into episodes.
pub const MAX_GAP: f64 = 0.5;

pub const CSV_HEADER: [&str; 12] = [
    "event_id", "agent_id", "role", "time", "x", "y", "heading", "speed", "yaw_rate", "accel",
    "length", "width",
];

/// Wraps an angle into `[-π, π]`.
pub fn normalize_angle(angle: f64) -> f64 {
    if (-PI..=PI).contains(&angle) {
        return angle;
    }
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    if wrapped == -PI && angle > 0.0 {
        PI
    } else {
        wrapped
    }
}

/// Index of `time` on the 0.1 s grid, tolerating float noise.
pub fn grid_index(time: f64) -> i64 {
    (time / DT).round() as i64
}

pub fn grid_time(index: i64) -> f64 {
    index as f64 / 10.0
}

fn on_grid(time: f64) -> bool {
    (time / DT - (time / DT).round()).abs() < 1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Subject,
    Object,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Subject => "subject",
            Role::Object => "object",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub yaw_rate: f64,
    /// Only recorded for the subject vehicle.
    pub accel: Option<f64>,
}

impl TrajectoryFrame {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: String,
    pub role: Role,
    pub length: f64,
    pub width: f64,
    pub frames: Vec<TrajectoryFrame>,
}

impl AgentTrack {
    pub fn start_time(&self) -> Option<f64> {
        self.frames.first().map(|f| f.time)
    }

    pub fn end_time(&self) -> Option<f64> {
        self.frames.last().map(|f| f.time)
    }

    /// Frame recorded at `time` on the 0.1 s grid.
    pub fn frame_at(&self, time: f64) -> Option<&TrajectoryFrame> {
        let target = grid_index(time);
        self.frames
            .binary_search_by_key(&target, |f| grid_index(f.time))
            .ok()
            .map(|i| &self.frames[i])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(GssmError::Data(format!(
                "agent {}: dimensions must be positive (length {}, width {})",
                self.agent_id, self.length, self.width
            )));
        }
        for pair in self.frames.windows(2) {
            if !(pair[1].time > pair[0].time) {
                return Err(GssmError::Data(format!(
                    "agent {}: time not strictly increasing at t = {}",
                    self.agent_id, pair[1].time
                )));
            }
        }
        for f in &self.frames {
            let finite = [f.time, f.x, f.y, f.heading, f.speed, f.yaw_rate]
                .iter()
                .all(|v| v.is_finite());
            if !finite || f.accel.is_some_and(|a| !a.is_finite()) {
                return Err(GssmError::Data(format!(
                    "agent {}: non-finite value at t = {}",
                    self.agent_id, f.time
                )));
            }
            if f.speed < 0.0 {
                return Err(GssmError::Data(format!(
                    "agent {}: negative speed at t = {}",
                    self.agent_id, f.time
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Crash,
    NearCrash,
    Baseline,
}

impl Severity {
    pub fn is_safety_critical(self) -> bool {
        !matches!(self, Severity::Baseline)
    }
}

/// Declares a categorical environment field whose discriminants follow the
/// fixed category order used for one-hot encoding.
macro_rules! category {
    ($(#[$meta:meta])* $name:ident { $($variant:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(index: usize) -> Option<Self> {
                Self::ALL.get(index).copied()
            }

            pub fn name(self) -> String {
                serde_json::to_value(self)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default()
            }
        }
    };
}

category!(Lighting {
    DarknessLighted,
    DarknessNotLighted,
    Dawn,
    Daylight,
    Dusk,
    Unknown,
});

category!(Weather {
    NoAdverse,
    Fog,
    MistLightRain,
    RainAndFog,
    RainingSleeting,
    SnowSleetAndFog,
    Snowing,
    Unknown,
});

category!(Surface {
    Dry,
    GravelOverAsphalt,
    GravelDirtRoad,
    Icy,
    Muddy,
    Snowy,
    Wet,
    Unknown,
});

category!(
    /// Level of service.
    TrafficDensity {
        LosA1,
        LosA2,
        LosB,
        LosC,
        LosD,
        LosE,
        LosF,
        Unknown,
    }
);

category!(EventType {
    RearEnd,
    AdjacentLane,
    CrossingTurning,
    Merging,
    VruAnimal,
    Other,
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentTags {
    pub lighting: Lighting,
    pub weather: Weather,
    pub surface: Surface,
    pub traffic_density: TrafficDensity,
}

impl Default for EnvironmentTags {
    fn default() -> Self {
        Self {
            lighting: Lighting::Daylight,
            weather: Weather::NoAdverse,
            surface: Surface::Dry,
            traffic_density: TrafficDensity::LosA1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotations {
    pub start_time: Option<f64>,
    pub impact_time: Option<f64>,
    pub end_time: Option<f64>,
    pub reaction_time: Option<f64>,
    pub event_type: EventType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: String,
    pub severity: Severity,
    pub tracks: Vec<AgentTrack>,
    pub environment: EnvironmentTags,
    pub annotations: EventAnnotations,
}

impl Event {
    pub fn subject(&self) -> &AgentTrack {
        self.tracks
            .iter()
            .find(|t| t.role == Role::Subject)
            .expect("validated event has a subject track")
    }

    pub fn objects(&self) -> impl Iterator<Item = &AgentTrack> {
        self.tracks.iter().filter(|t| t.role == Role::Object)
    }

    pub fn track(&self, agent_id: &str) -> Option<&AgentTrack> {
        self.tracks.iter().find(|t| t.agent_id == agent_id)
    }

    pub fn validate(&self) -> Result<()> {
        let subjects = self.tracks.iter().filter(|t| t.role == Role::Subject).count();
        if subjects != 1 {
            return Err(GssmError::Structure(format!(
                "event {}: expected exactly one subject track, found {subjects}",
                self.event_id
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for track in &self.tracks {
            if !seen.insert(track.agent_id.as_str()) {
                return Err(GssmError::Structure(format!(
                    "event {}: duplicate agent id {}",
                    self.event_id, track.agent_id
                )));
            }
            track.validate()?;
        }
        let a = &self.annotations;
        if self.severity.is_safety_critical() && a.impact_time.is_none() {
            return Err(GssmError::Structure(format!(
                "event {}: impact_time is required for {:?} events",
                self.event_id, self.severity
            )));
        }
        let ordered = [a.start_time, a.impact_time, a.end_time]
            .iter()
            .flatten()
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[0] <= w[1]);
        if !ordered {
            return Err(GssmError::Structure(format!(
                "event {}: annotations must satisfy start <= impact <= end",
                self.event_id
            )));
        }
        Ok(())
    }
}

/// Interpolates `heading` along the shortest arc between `a` and `b`.
pub fn interpolate_angle(a: f64, b: f64, fraction: f64) -> f64 {
    let delta = normalize_angle(b - a);
    normalize_angle(a + fraction * delta)
}

fn lerp(a: f64, b: f64, fraction: f64) -> f64 {
    a + fraction * (b - a)
}

fn interpolate_frame(a: &TrajectoryFrame, b: &TrajectoryFrame, time: f64) -> TrajectoryFrame {
    let fraction = (time - a.time) / (b.time - a.time);
    TrajectoryFrame {
        time,
        x: lerp(a.x, b.x, fraction),
        y: lerp(a.y, b.y, fraction),
        heading: interpolate_angle(a.heading, b.heading, fraction),
        speed: lerp(a.speed, b.speed, fraction),
        yaw_rate: lerp(a.yaw_rate, b.yaw_rate, fraction),
        accel: match (a.accel, b.accel) {
            (Some(x), Some(y)) => Some(lerp(x, y, fraction)),
            _ => None,
        },
    }
}

/// Linearly interpolates a track onto the 0.1 s grid.
///
/// The output spans only the measured interval (no extrapolation). Object
/// tracks are not bridged across detection gaps longer than [`MAX_GAP`].
pub fn resample_track(track: &AgentTrack) -> Result<AgentTrack> {
    track.validate()?;
    let mut frames = Vec::with_capacity(track.frames.len());
    for (i, frame) in track.frames.iter().enumerate() {
        let mut frame = *frame;
        frame.heading = normalize_angle(frame.heading);
        if on_grid(frame.time) {
            frame.time = grid_time(grid_index(frame.time));
            if frames.last().is_none_or(|last: &TrajectoryFrame| grid_index(last.time) < grid_index(frame.time)) {
                frames.push(frame);
            }
        }
        let Some(next) = track.frames.get(i + 1) else { break };
        let mut next = *next;
        next.heading = normalize_angle(next.heading);
        if track.role == Role::Object && next.time - frame.time > MAX_GAP + 1e-9 {
            continue;
        }
        let first = (frame.time / DT).floor() as i64 + 1;
        let last = (next.time / DT).ceil() as i64 - 1;
        for k in first..=last {
            let t = grid_time(k);
            if t <= frame.time || t >= next.time || on_grid(next.time) && k == grid_index(next.time) {
                continue;
            }
            frames.push(interpolate_frame(&frame, &next, t));
        }
    }
    Ok(AgentTrack { frames, ..track.clone() })
}

/// Resamples every track and clips object frames to the subject time span.
pub fn resample_event(event: &Event) -> Result<Event> {
    let mut tracks = event
        .tracks
        .iter()
        .map(resample_track)
        .collect::<Result<Vec<_>>>()?;
    let (start, end) = {
        let subject = tracks
            .iter()
            .find(|t| t.role == Role::Subject)
            .ok_or_else(|| GssmError::Structure(format!("event {}: no subject track", event.event_id)))?;
        (
            subject.start_time().unwrap_or(f64::INFINITY),
            subject.end_time().unwrap_or(f64::NEG_INFINITY),
        )
    };
    for track in tracks.iter_mut().filter(|t| t.role == Role::Object) {
        track.frames.retain(|f| f.time >= start - 1e-9 && f.time <= end + 1e-9);
    }
    let out = Event { tracks, ..event.clone() };
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct EventMetadata {
    event_id: String,
    severity: Severity,
    lighting: Lighting,
    weather: Weather,
    surface: Surface,
    traffic_density: TrafficDensity,
    start_time: Option<f64>,
    impact_time: Option<f64>,
    end_time: Option<f64>,
    reaction_time: Option<f64>,
    event_type: EventType,
}

/// Metadata path paired with a trajectory CSV.
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn parse_field(record: &csv::StringRecord, index: usize, name: &str, line: u64) -> Result<f64> {
    let raw = record.get(index).unwrap_or("").trim();
    raw.parse::<f64>()
        .map_err(|_| GssmError::Data(format!("line {line}: cannot parse {name} = {raw:?}")))
}

/// Reads trajectory rows, grouped by agent in file order.
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<(String, AgentTrack)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut columns = [0usize; 12];
    for (slot, name) in columns.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GssmError::Schema(format!("{}: missing column `{name}`", path.display())))?;
    }
    let mut order: Vec<String> = Vec::new();
    let mut tracks: BTreeMap<String, (String, AgentTrack)> = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row as u64 + 2;
        let event_id = record.get(columns[0]).unwrap_or("").to_owned();
        let agent_id = record.get(columns[1]).unwrap_or("").to_owned();
        let role = match record.get(columns[2]).unwrap_or("") {
            "subject" => Role::Subject,
            "object" => Role::Object,
            other => return Err(GssmError::Data(format!("line {line}: unknown role {other:?}"))),
        };
        let accel_raw = record.get(columns[9]).unwrap_or("").trim();
        let accel = if accel_raw.is_empty() {
            None
        } else {
            Some(parse_field(&record, columns[9], "accel", line)?)
        };
        let frame = TrajectoryFrame {
            time: parse_field(&record, columns[3], "time", line)?,
            x: parse_field(&record, columns[4], "x", line)?,
            y: parse_field(&record, columns[5], "y", line)?,
            heading: parse_field(&record, columns[6], "heading", line)?,
            speed: if record.get(columns[7]).unwrap_or("").trim().is_empty() {
                f64::NAN
            } else {
                parse_field(&record, columns[7], "speed", line)?
            },
            yaw_rate: parse_field(&record, columns[8], "yaw_rate", line)?,
            accel,
        };
        let length = parse_field(&record, columns[10], "length", line)?;
        let width = parse_field(&record, columns[11], "width", line)?;
        let entry = tracks.entry(agent_id.clone()).or_insert_with(|| {
            order.push(agent_id.clone());
            (
                event_id.clone(),
                AgentTrack { agent_id: agent_id.clone(), role, length, width, frames: Vec::new() },
            )
        });
        if entry.1.role != role {
            return Err(GssmError::Data(format!("line {line}: agent {agent_id} changes role")));
        }
        if let Some(last) = entry.1.frames.last() {
            if !(frame.time > last.time) {
                return Err(GssmError::Data(format!(
                    "line {line}: time of agent {agent_id} is not strictly increasing"
                )));
            }
        }
        entry.1.frames.push(frame);
    }
    Ok(order.into_iter().filter_map(|id| tracks.remove(&id)).collect())
}

/// Loads one event (`<stem>.csv` + `<stem>.json`), validates it and resamples it
/// onto the 0.1 s grid.
pub fn load_event(path: &Path) -> Result<Event> {
    let event = load_event_raw(path)?;
    event.validate()?;
    resample_event(&event)
}

/// Loads an event as recorded, without validation or resampling.
///
/// An empty `speed` field reads as NaN, marking a missing measurement.
pub fn load_event_raw(path: &Path) -> Result<Event> {
    let meta_path = metadata_path(path);
    let meta: EventMetadata = serde_json::from_str(&fs::read_to_string(&meta_path)?)
        .map_err(|e| GssmError::Schema(format!("{}: {e}", meta_path.display())))?;
    let tracks: Vec<AgentTrack> = read_trajectory_csv(path)?
        .into_iter()
        .filter(|(event_id, _)| event_id == &meta.event_id)
        .map(|(_, track)| track)
        .collect();
    if !tracks.iter().any(|t| t.role == Role::Subject) {
        return Err(GssmError::Structure(format!("event {}: no subject track", meta.event_id)));
    }
    let event = Event {
        event_id: meta.event_id,
        severity: meta.severity,
        tracks,
        environment: EnvironmentTags {
            lighting: meta.lighting,
            weather: meta.weather,
            surface: meta.surface,
            traffic_density: meta.traffic_density,
        },
        annotations: EventAnnotations {
            start_time: meta.start_time,
            impact_time: meta.impact_time,
            end_time: meta.end_time,
            reaction_time: meta.reaction_time,
            event_type: meta.event_type,
        },
    };
    Ok(event)
}

fn format_opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the trajectory rows of `tracks`.
pub fn write_trajectory_csv(path: &Path, event_id: &str, tracks: &[AgentTrack]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(CSV_HEADER)?;
    for track in tracks {
        for f in &track.frames {
            writer.write_record([
                event_id.to_owned(),
                track.agent_id.clone(),
                track.role.as_str().to_owned(),
                f.time.to_string(),
                f.x.to_string(),
                f.y.to_string(),
                f.heading.to_string(),
                f.speed.to_string(),
                f.yaw_rate.to_string(),
                format_opt(f.accel),
                track.length.to_string(),
                track.width.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Writes `<stem>.csv` and `<stem>.json` for `event`.
pub fn save_event(event: &Event, path: &Path) -> Result<()> {
    write_trajectory_csv(path, &event.event_id, &event.tracks)?;
    let meta = EventMetadata {
        event_id: event.event_id.clone(),
        severity: event.severity,
        lighting: event.environment.lighting,
        weather: event.environment.weather,
        surface: event.environment.surface,
        traffic_density: event.environment.traffic_density,
        start_time: event.annotations.start_time,
        impact_time: event.annotations.impact_time,
        end_time: event.annotations.end_time,
        reaction_time: event.annotations.reaction_time,
        event_type: event.annotations.event_type,
    };
    fs::write(metadata_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Loads every `*.csv` event in `dir`, sorted by file name.
pub fn load_event_dir(dir: &Path) -> Result<Vec<Event>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && metadata_path(p).exists())
        .collect();
    paths.sort();
    paths.iter().map(|p| load_event(p)).collect()
}

#[derive(Debug, Clone)]
struct Episode {
    source: usize,
    frames: Vec<TrajectoryFrame>,
}

fn split_episodes(track: &AgentTrack, source: usize) -> Vec<Episode> {
    let mut episodes: Vec<Episode> = Vec::new();
    for frame in &track.frames {
        match episodes.last_mut() {
            Some(ep) if frame.time - ep.frames.last().unwrap().time <= MAX_GAP + 1e-9 => {
                ep.frames.push(*frame)
            }
            _ => episodes.push(Episode { source, frames: vec![*frame] }),
        }
    }
    episodes
}

fn relative_position(subject: &AgentTrack, frame: &TrajectoryFrame) -> Option<[f64; 2]> {
    subject.frame_at(frame.time).map(|s| [frame.x - s.x, frame.y - s.y])
}

/// Matching radius for a lost object: its displacement relative to the
/// subject over the final 0.3 s, clamped to `[0.5, 2.5]` m.
pub fn reindex_threshold(displacement: f64) -> f64 {
    displacement.clamp(0.5, 2.5)
}

/// Re-attaches objects that were lost and re-detected under a new id.
///
/// A newly appearing detection episode inherits the id of the nearest
/// previously lost object when its first relative position lies within that
/// object's matching radius (see [`reindex_threshold`]) of the object's last
/// relative position. Episodes that were lost but never re-detected keep
/// their ids; a split-off episode that matches nothing gets `<id>_<n>`.
pub fn reindex_objects(event: &Event) -> Event {
    let subject = event.subject();
    let objects: Vec<&AgentTrack> = event.objects().collect();
    let mut episodes: Vec<Episode> = objects
        .iter()
        .enumerate()
        .flat_map(|(i, t)| split_episodes(t, i))
        .collect();
    episodes.sort_by(|a, b| {
        a.frames[0].time.total_cmp(&b.frames[0].time).then(a.source.cmp(&b.source))
    });

    // One output group per surviving id; each holds the episodes merged into it.
    struct Group {
        id: String,
        source: usize,
        frames: Vec<TrajectoryFrame>,
    }
    let mut groups: Vec<Group> = Vec::new();
    let mut used_ids: BTreeMap<String, usize> = BTreeMap::new();
    for ep in episodes {
        let start = ep.frames[0];
        let start_rel = relative_position(subject, &start);
        let mut best: Option<(usize, f64)> = None;
        if let Some(start_rel) = start_rel {
            for (gi, group) in groups.iter().enumerate() {
                let last = group.frames.last().unwrap();
                if last.time >= start.time - 1e-9 {
                    continue;
                }
                let Some(last_rel) = relative_position(subject, last) else { continue };
                let earlier_time = (last.time - 0.3).max(group.frames[0].time);
                let earlier = group
                    .frames
                    .iter()
                    .rev()
                    .find(|f| f.time <= earlier_time + 1e-9)
                    .and_then(|f| relative_position(subject, f))
                    .unwrap_or(last_rel);
                let displacement = (last_rel[0] - earlier[0]).hypot(last_rel[1] - earlier[1]);
                let threshold = reindex_threshold(displacement);
                let distance = (start_rel[0] - last_rel[0]).hypot(start_rel[1] - last_rel[1]);
                if distance <= threshold && best.is_none_or(|(_, d)| distance < d) {
                    best = Some((gi, distance));
                }
            }
        }
        match best {
            Some((gi, _)) => groups[gi].frames.extend(ep.frames),
            None => {
                let base = &objects[ep.source].agent_id;
                let count = used_ids.entry(base.clone()).or_insert(0);
                *count += 1;
                let id = if *count == 1 { base.clone() } else { format!("{base}_{count}") };
                groups.push(Group { id, source: ep.source, frames: ep.frames });
            }
        }
    }

    let mut tracks = vec![subject.clone()];
    groups.sort_by_key(|g| g.source);
    for group in groups {
        let template = objects[group.source];
        tracks.push(AgentTrack {
            agent_id: group.id,
            role: Role::Object,
            length: template.length,
            width: template.width,
            frames: group.frames,
        });
    }
    Event { tracks, ..event.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(time: f64, x: f64, y: f64, heading: f64, speed: f64) -> TrajectoryFrame {
        TrajectoryFrame { time, x, y, heading, speed, yaw_rate: 0.0, accel: None }
    }

    fn track(id: &str, role: Role, frames: Vec<TrajectoryFrame>) -> AgentTrack {
        AgentTrack { agent_id: id.into(), role, length: 4.0, width: 1.8, frames }
    }

    fn event(tracks: Vec<AgentTrack>) -> Event {
        Event {
            event_id: "e1".into(),
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

    #[test]
    fn angle_wrap() {
        assert!((normalize_angle(3.5) - (3.5 - 2.0 * PI)).abs() < 1e-12);
        assert!((normalize_angle(3.5) + 2.783_185_307).abs() < 1e-6);
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn resample_inserts_midpoint() {
        let mut a = frame(0.0, 0.0, 0.0, 0.0, 10.0);
        a.accel = Some(1.0);
        let mut b = frame(0.2, 2.0, 1.0, 0.2, 12.0);
        b.accel = Some(3.0);
        let t = track("s", Role::Subject, vec![a, b]);
        let out = resample_track(&t).unwrap();
        assert_eq!(out.frames.len(), 3);
        let mid = out.frames[1];
        assert!((mid.time - 0.1).abs() < 1e-12);
        assert!((mid.x - 1.0).abs() < 1e-12);
        assert!((mid.y - 0.5).abs() < 1e-12);
        assert!((mid.heading - 0.1).abs() < 1e-12);
        assert!((mid.speed - 11.0).abs() < 1e-12);
        assert_eq!(mid.accel, Some(2.0));
    }

    #[test]
    fn heading_interpolates_across_pi() {
        let a = frame(0.0, 0.0, 0.0, PI - 0.1, 1.0);
        let b = frame(0.2, 0.0, 0.0, -PI + 0.1, 1.0);
        let out = resample_track(&track("s", Role::Subject, vec![a, b])).unwrap();
        assert!((out.frames[1].heading.abs() - PI).abs() < 1e-9);
    }

    #[test]
    fn resample_is_idempotent() {
        let frames = (0..30)
            .map(|k| frame(k as f64 * 0.1, k as f64 * 0.7, (k as f64).sin(), 0.3, 7.0))
            .collect();
        let once = resample_track(&track("s", Role::Subject, frames)).unwrap();
        let twice = resample_track(&once).unwrap();
        assert_eq!(once.frames.len(), twice.frames.len());
        for (a, b) in once.frames.iter().zip(&twice.frames) {
            assert!((a.x - b.x).abs() <= 1e-12 && (a.y - b.y).abs() <= 1e-12);
            assert_eq!(a.time, b.time);
        }
    }

    #[test]
    fn object_gap_is_not_bridged() {
        let frames = vec![frame(0.0, 0.0, 0.0, 0.0, 1.0), frame(1.0, 1.0, 0.0, 0.0, 1.0)];
        let out = resample_track(&track("o", Role::Object, frames)).unwrap();
        assert_eq!(out.frames.len(), 2);
    }

    #[test]
    fn non_monotonic_time_is_rejected() {
        let frames = vec![frame(0.2, 0.0, 0.0, 0.0, 1.0), frame(0.1, 1.0, 0.0, 0.0, 1.0)];
        assert!(matches!(
            resample_track(&track("o", Role::Subject, frames)),
            Err(GssmError::Data(_))
        ));
    }

    #[test]
    fn crash_requires_impact_time() {
        let mut e = event(vec![track("s", Role::Subject, vec![frame(0.0, 0.0, 0.0, 0.0, 1.0)])]);
        e.severity = Severity::Crash;
        assert!(matches!(e.validate(), Err(GssmError::Structure(_))));
    }

    #[test]
    fn event_without_subject_is_rejected() {
        let e = event(vec![track("o", Role::Object, vec![frame(0.0, 0.0, 0.0, 0.0, 1.0)])]);
        assert!(matches!(e.validate(), Err(GssmError::Structure(_))));
    }

    fn static_subject(n: usize) -> AgentTrack {
        track(
            "s",
            Role::Subject,
            (0..n).map(|k| frame(k as f64 * 0.1, 0.0, 0.0, 0.0, 0.0)).collect(),
        )
    }

    #[test]
    fn reindex_joins_nearby_redetection() {
        // Object A approaches at 1 m per 0.3 s, is lost at t = 1.0 and a new
        // object appears at t = 1.1 0.2 m away: radius 1.0 m, so they merge.
        let a: Vec<_> = (0..=10)
            .map(|k| {
                let t = k as f64 * 0.1;
                frame(t, 10.0 + (1.0 - t) / 0.3, 0.0, 0.0, 0.0)
            })
            .collect();
        let b: Vec<_> = (11..=20).map(|k| frame(k as f64 * 0.1, 10.2, 0.0, 0.0, 0.0)).collect();
        let e = event(vec![static_subject(21), track("A", Role::Object, a), track("B", Role::Object, b)]);
        let out = reindex_objects(&e);
        let ids: Vec<_> = out.objects().map(|t| t.agent_id.clone()).collect();
        assert_eq!(ids, vec!["A".to_string()]);
        assert_eq!(out.track("A").unwrap().frames.len(), 21);
    }

    #[test]
    fn reindex_keeps_far_object_separate() {
        let a: Vec<_> = (0..=10).map(|k| frame(k as f64 * 0.1, 10.0, 0.0, 0.0, 0.0)).collect();
        let b: Vec<_> = (11..=20).map(|k| frame(k as f64 * 0.1, 15.0, 0.0, 0.0, 0.0)).collect();
        let e = event(vec![static_subject(21), track("A", Role::Object, a), track("B", Role::Object, b)]);
        let out = reindex_objects(&e);
        assert_eq!(out.objects().count(), 2);
    }

    #[test]
    fn reindex_stationary_pair_uses_minimum_radius() {
        assert_eq!(reindex_threshold(0.0), 0.5);
        assert_eq!(reindex_threshold(9.0), 2.5);
        let a: Vec<_> = (0..=10).map(|k| frame(k as f64 * 0.1, 10.0, 0.0, 0.0, 0.0)).collect();
        let near: Vec<_> = (11..=20).map(|k| frame(k as f64 * 0.1, 10.45, 0.0, 0.0, 0.0)).collect();
        let e = event(vec![static_subject(21), track("A", Role::Object, a.clone()), track("B", Role::Object, near)]);
        assert_eq!(reindex_objects(&e).objects().count(), 1);
        let far: Vec<_> = (11..=20).map(|k| frame(k as f64 * 0.1, 10.6, 0.0, 0.0, 0.0)).collect();
        let e = event(vec![static_subject(21), track("A", Role::Object, a), track("B", Role::Object, far)]);
        assert_eq!(reindex_objects(&e).objects().count(), 2);
    }

    #[test]
    fn reindex_never_merges_coexisting_objects() {
        let a: Vec<_> = (0..=10).map(|k| frame(k as f64 * 0.1, 10.0, 0.0, 0.0, 0.0)).collect();
        let b: Vec<_> = (5..=20).map(|k| frame(k as f64 * 0.1, 10.1, 0.0, 0.0, 0.0)).collect();
        let e = event(vec![static_subject(21), track("A", Role::Object, a), track("B", Role::Object, b)]);
        assert_eq!(reindex_objects(&e).objects().count(), 2);
    }
}
