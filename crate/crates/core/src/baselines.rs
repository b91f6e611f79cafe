//! Two-dimensional surrogate safety measures used as baselines.
//!
//! Footprints are rectangles of length `l` along the heading and width `w`.
//! Every measure returns seconds, with `f64::INFINITY` marking "no collision
//! course".

use serde::{Deserialize, Serialize};

use crate::data::TrajectoryFrame;
use crate::geometry::{dot, norm, rotate, sub, Vec2};

/// Values above this are treated as the sentinel by [`risk_from_value`].
pub const SENTINEL_CAP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Ttc2d,
    Tadv,
    Act,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Ttc2d, Measure::Tadv, Measure::Act];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Ttc2d => "ttc2d",
            Measure::Tadv => "tadv",
            Measure::Act => "act",
        }
    }

    pub fn evaluate(self, i: &Agent, j: &Agent) -> SsmValue {
        let value = match self {
            Measure::Ttc2d => ttc2d(i, j),
            Measure::Tadv => tadv(i, j),
            Measure::Act => act(i, j),
        };
        SsmValue { measure: self, value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmValue {
    pub measure: Measure,
    pub value: f64,
}

impl SsmValue {
    pub fn is_sentinel(&self) -> bool {
        self.value.is_infinite()
    }

    pub fn risk(&self) -> f64 {
        risk_from_value(self.value)
    }
}

/// Maps a time-based measure onto "higher is riskier"; the sentinel becomes
/// the minimal risk `-SENTINEL_CAP`.
pub fn risk_from_value(value: f64) -> f64 {
    -value.min(SENTINEL_CAP)
}

/// Instantaneous kinematic state and footprint of a road user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub position: Vec2,
    pub velocity: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl Agent {
    pub fn from_frame(frame: &TrajectoryFrame, length: f64, width: f64) -> Self {
        Self { position: frame.position(), velocity: frame.velocity(), heading: frame.heading, length, width }
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Vec2; 4] {
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|c| {
            let r = rotate(c, self.heading);
            [self.position[0] + r[0], self.position[1] + r[1]]
        })
    }
}

fn axis_ttc(gap: f64, closing: f64) -> f64 {
    if gap > 0.0 && closing > 0.0 {
        gap / closing
    } else {
        f64::INFINITY
    }
}

/// Minimum of the longitudinal and lateral time-to-collision, measured along
/// the axes of `i`'s body frame with projected half-extents.
pub fn ttc2d(i: &Agent, j: &Agent) -> f64 {
    let dp = rotate(sub(j.position, i.position), -i.heading);
    let dv = rotate(sub(j.velocity, i.velocity), -i.heading);
    let delta = j.heading - i.heading;
    let (s, c) = (delta.sin().abs(), delta.cos().abs());
    let half_x = 0.5 * i.length + 0.5 * j.length * c + 0.5 * j.width * s;
    let half_y = 0.5 * i.width + 0.5 * j.length * s + 0.5 * j.width * c;
    let gap_x = dp[0].abs() - half_x;
    let gap_y = dp[1].abs() - half_y;
    if gap_x <= 0.0 && gap_y <= 0.0 {
        return 0.0;
    }
    let closing_x = -dp[0].signum() * dv[0];
    let closing_y = -dp[1].signum() * dv[1];
    axis_ttc(gap_x, closing_x).min(axis_ttc(gap_y, closing_y))
}

fn cross(o: Vec2, a: Vec2, b: Vec2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull (counter-clockwise, no collinear points) by monotone chain.
fn convex_hull(mut points: Vec<Vec2>) -> Vec<Vec2> {
    points.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    points.dedup();
    if points.len() < 3 {
        return points;
    }
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * points.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Vec2>> =
            if pass == 0 { Box::new(points.iter()) } else { Box::new(points.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn closest_on_segment(p: Vec2, a: Vec2, b: Vec2) -> Vec2 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    [a[0] + t * ab[0], a[1] + t * ab[1]]
}

/// Point of the Minkowski difference `j ⊖ i` closest to the origin, or `None`
/// when the footprints overlap.
fn separation(i: &Agent, j: &Agent) -> Option<Vec2> {
    let (ci, cj) = (i.corners(), j.corners());
    let diffs = cj.iter().flat_map(|b| ci.iter().map(move |a| sub(*b, *a))).collect();
    let hull = convex_hull(diffs);
    let n = hull.len();
    let inside = (0..n).all(|k| cross(hull[k], hull[(k + 1) % n], [0.0, 0.0]) > 0.0);
    if inside {
        return None;
    }
    (0..n)
        .map(|k| closest_on_segment([0.0, 0.0], hull[k], hull[(k + 1) % n]))
        .min_by(|a, b| norm(*a).total_cmp(&norm(*b)))
}

/// Shortest boundary-to-boundary distance between the footprints (0 on overlap).
pub fn footprint_distance(i: &Agent, j: &Agent) -> f64 {
    separation(i, j).map_or(0.0, norm)
}

/// Shortest footprint distance divided by the rate at which it is closing.
pub fn act(i: &Agent, j: &Agent) -> f64 {
    let Some(d) = separation(i, j) else { return 0.0 };
    let dist = norm(d);
    if dist == 0.0 {
        return 0.0;
    }
    let n = [d[0] / dist, d[1] / dist];
    let closing = -dot(n, sub(j.velocity, i.velocity));
    if closing > 0.0 {
        dist / closing
    } else {
        f64::INFINITY
    }
}

/// Directions closer than this (in |sin|) are treated as parallel by [`tadv`].
pub const PARALLEL_TOL: f64 = 1e-9;

/// First time `t ≥ 0` at which `a`'s centroid enters the strip of half-width
/// `w_b / 2` around `b`'s straight path.
fn strip_arrival(a: &Agent, b: &Agent, dir_b: Vec2) -> f64 {
    let normal = [-dir_b[1], dir_b[0]];
    let offset = dot(sub(a.position, b.position), normal);
    let rate = dot(a.velocity, normal);
    let half = 0.5 * b.width;
    if offset.abs() <= half {
        return 0.0;
    }
    let toward = -offset.signum() * rate;
    if toward > 0.0 {
        (offset.abs() - half) / toward
    } else {
        f64::INFINITY
    }
}

fn direction(a: &Agent) -> Vec2 {
    let speed = norm(a.velocity);
    if speed > 0.0 {
        [a.velocity[0] / speed, a.velocity[1] / speed]
    } else {
        [a.heading.cos(), a.heading.sin()]
    }
}

/// Predicted gap between the two agents' arrivals at the crossing zone of
/// their constant-velocity paths.
pub fn tadv(i: &Agent, j: &Agent) -> f64 {
    let (di, dj) = (direction(i), direction(j));
    if (di[0] * dj[1] - di[1] * dj[0]).abs() < PARALLEL_TOL {
        return f64::INFINITY;
    }
    let ti = strip_arrival(i, j, dj);
    let tj = strip_arrival(j, i, di);
    if ti.is_infinite() || tj.is_infinite() {
        return f64::INFINITY;
    }
    (ti - tj).abs()
}
