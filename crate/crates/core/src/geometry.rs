//! Multi-directional spacing between two road users.

use serde::{Deserialize, Serialize};

use crate::data::normalize_angle;

/// Below this relative speed the relative frame falls back to the subject heading.
pub const REL_SPEED_EPS: f64 = 1e-9;

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarSpacing {
    pub rho: f64,
    pub s: f64,
    pub rel_speed: f64,
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Rotates `v` by `angle` counterclockwise.
pub fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Expresses a global vector in a frame whose +y axis points along `axis_angle`.
pub fn to_frame_with_y_along(v: Vec2, axis_angle: f64) -> Vec2 {
    // The frame's +x axis is `axis_angle − π/2`.
    rotate(v, std::f64::consts::FRAC_PI_2 - axis_angle)
}

/// Direction of the relative frame's +y axis and whether the heading fallback was used.
pub fn relative_axis(vel_i: Vec2, heading_i: f64, vel_j: Vec2) -> (f64, bool) {
    let v_ij = sub(vel_i, vel_j);
    if norm(v_ij) < REL_SPEED_EPS {
        (heading_i, true)
    } else {
        (v_ij[1].atan2(v_ij[0]), false)
    }
}

/// Polar spacing of `j` seen from `i` in the relative-velocity frame.
pub fn relative_polar_spacing(
    pos_i: Vec2,
    vel_i: Vec2,
    heading_i: f64,
    pos_j: Vec2,
    vel_j: Vec2,
) -> PolarSpacing {
    let v_ij = sub(vel_i, vel_j);
    let rel_speed = norm(v_ij);
    let (axis, fallback) = relative_axis(vel_i, heading_i, vel_j);
    let local = to_frame_with_y_along(sub(pos_j, pos_i), axis);
    PolarSpacing {
        rho: normalize_angle(local[1].atan2(local[0])),
        s: norm(local),
        rel_speed: if fallback { 0.0 } else { rel_speed },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn axis_aligned_case() {
        let p = relative_polar_spacing([0.0, 0.0], [1.0, 0.0], 0.0, [5.0, 0.0], [0.0, 0.0]);
        assert!((p.rho - FRAC_PI_2).abs() < 1e-12);
        assert!((p.s - 5.0).abs() < 1e-12);
        assert!((p.rel_speed - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_velocities_use_heading() {
        let p = relative_polar_spacing([0.0, 0.0], [3.0, 0.0], 0.0, [0.0, 3.0], [3.0, 0.0]);
        assert_eq!(p.rel_speed, 0.0);
        assert!((p.s - 3.0).abs() < 1e-12);
        // Heading 0 puts +y along global +x, so global +y is the local −x axis.
        assert!((p.rho.abs() - std::f64::consts::PI).abs() < 1e-12);
    }

    fn coord() -> impl Strategy<Value = f64> {
        -100.0..100.0f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn spacing_is_euclidean(
            xi in coord(), yi in coord(), vxi in -30.0..30.0f64, vyi in -30.0..30.0f64, h in -3.2..3.2f64,
            xj in coord(), yj in coord(), vxj in -30.0..30.0f64, vyj in -30.0..30.0f64,
        ) {
            let p = relative_polar_spacing([xi, yi], [vxi, vyi], h, [xj, yj], [vxj, vyj]);
            let direct = (xj - xi).hypot(yj - yi);
            prop_assert!((p.s - direct).abs() <= 1e-12 * direct.max(1.0));
            prop_assert!(p.rho.abs() <= std::f64::consts::PI);
        }
    }

    proptest! {
        #[test]
        fn global_rotation_invariance(
            xi in coord(), yi in coord(), vxi in -30.0..30.0f64, vyi in -30.0..30.0f64, h in -3.2..3.2f64,
            xj in coord(), yj in coord(), vxj in -30.0..30.0f64, vyj in -30.0..30.0f64,
            angle in -3.2..3.2f64,
        ) {
            let a = relative_polar_spacing([xi, yi], [vxi, vyi], h, [xj, yj], [vxj, vyj]);
            let r = |v: Vec2| rotate(v, angle);
            let b = relative_polar_spacing(r([xi, yi]), r([vxi, vyi]), h + angle, r([xj, yj]), r([vxj, vyj]));
            prop_assert!((a.s - b.s).abs() < 1e-9);
            prop_assert!((a.rel_speed - b.rel_speed).abs() < 1e-9);
            let drho = normalize_angle(a.rho - b.rho);
            prop_assert!(drho.abs() < 1e-9 || a.s < 1e-9);
        }

        #[test]
        fn zero_rel_speed_iff_fallback(vx in -30.0..30.0f64, vy in -30.0..30.0f64, same in any::<bool>(), dx in 0.01..5.0f64) {
            let vj = if same { [vx, vy] } else { [vx + dx, vy] };
            let p = relative_polar_spacing([0.0, 0.0], [vx, vy], 0.3, [4.0, 1.0], vj);
            let (_, fallback) = relative_axis([vx, vy], 0.3, vj);
            prop_assert_eq!(p.rel_speed == 0.0, fallback);
            prop_assert_eq!(fallback, same);
        }
    }
}
