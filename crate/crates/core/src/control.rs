//! Longitudinal platoon law, preview (pure-pursuit) steering and waypoint
//! following.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{wrap_angle, Real};
use crate::track::{Path, PathError, Point, Projection};
use crate::vehicle::{VehicleParams, VehicleState};

/// Pose farther than this from the path is considered off-track.
pub const OFF_TRACK_M: f64 = 1.0;

/// Distance at which the final waypoint counts as reached.
pub const ARRIVAL_TOLERANCE_M: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("pose is {distance_m:.3} m from the path (limit {OFF_TRACK_M} m)")]
    OffTrack { distance_m: f64 },
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("lookahead must be positive")]
    InvalidLookahead,
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Feedback gains of the spacing/speed law.
///
/// Gains act on errors with a stabilizing sign: a positive spacing surplus
/// accelerates, running faster than the leader or predecessor decelerates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatoonGains<T> {
    pub k_p: T,
    pub k_v1: T,
    pub k_v2: T,
    /// Desired centre-to-centre spacing along the track.
    pub s_des_m: T,
    /// Control interval of the discrete speed update.
    pub dt_s: T,
}

impl<T: Real> Default for PlatoonGains<T> {
    fn default() -> Self {
        Self {
            k_p: T::lit(0.2),
            k_v1: T::lit(4.0),
            k_v2: T::lit(1.5),
            s_des_m: T::lit(0.5),
            dt_s: T::lit(0.125),
        }
    }
}

impl<T: Real> PlatoonGains<T> {
    pub fn validate(&self, params: &VehicleParams<T>) -> Result<(), ControlError> {
        let finite = [self.k_p, self.k_v1, self.k_v2, self.s_des_m, self.dt_s]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(ControlError::InvalidGains("non-finite value".into()));
        }
        if self.s_des_m <= params.body_length_m {
            return Err(ControlError::InvalidGains(format!(
                "desired spacing {} must exceed body length {}",
                self.s_des_m, params.body_length_m
            )));
        }
        if self.dt_s <= T::zero() {
            return Err(ControlError::InvalidGains("dt must be positive".into()));
        }
        Ok(())
    }
}

/// Unsaturated value of the spacing/speed law.
#[inline]
pub fn platoon_accel_raw<T: Real>(
    self_v: T,
    pred_v: T,
    leader_v: T,
    spacing_m: T,
    gains: &PlatoonGains<T>,
) -> T {
    gains.k_p * (spacing_m - gains.s_des_m)
        - gains.k_v1 * (self_v - leader_v)
        - gains.k_v2 * (self_v - pred_v)
}

/// Follower acceleration, saturated to the accel envelope.
pub fn platoon_accel<T: Real>(
    self_v: T,
    pred_v: T,
    leader_v: T,
    spacing_m: T,
    gains: &PlatoonGains<T>,
    params: &VehicleParams<T>,
) -> T {
    params.accel_limit_mps2.clamp(platoon_accel_raw(
        self_v, pred_v, leader_v, spacing_m, gains,
    ))
}

/// Discrete speed update `v_{k+1} = v_k + a·Δt`, kept inside the speed
/// envelope.
#[inline]
pub fn next_speed<T: Real>(
    v: T,
    accel: T,
    gains: &PlatoonGains<T>,
    params: &VehicleParams<T>,
) -> T {
    params.speed_limit_mps.clamp(v + accel * gains.dt_s)
}

/// Path plus preview distance for lateral control.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTarget<T> {
    pub path: Path<T>,
    pub lookahead_m: T,
}

impl<T: Real> PathTarget<T> {
    pub fn new(path: Path<T>, lookahead_m: T) -> Result<Self, ControlError> {
        if !(lookahead_m > T::zero()) {
            return Err(ControlError::InvalidLookahead);
        }
        Ok(Self { path, lookahead_m })
    }
}

/// Geometry of one preview evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preview<T> {
    pub projection: Projection<T>,
    pub target: Point<T>,
    /// Bearing of the preview point relative to the vehicle heading.
    pub alpha_rad: T,
    /// Straight-line distance to the preview point.
    pub distance_m: T,
    /// Unclamped steering angle.
    pub steer_rad: T,
}

fn pursue<T: Real>(
    pose: &VehicleState<T>,
    target: Point<T>,
    params: &VehicleParams<T>,
) -> (T, T, T) {
    let dx = target.x - pose.x_m;
    let dy = target.y - pose.y_m;
    let d = dx.hypot(dy);
    if d <= T::epsilon() {
        return (T::zero(), d, T::zero());
    }
    let alpha = wrap_angle(dx.atan2(dy) - pose.heading_rad);
    let steer = (T::lit(2.0) * params.wheelbase_m * alpha.sin() / d).atan();
    (alpha, d, steer)
}

fn check_on_track<T: Real>(proj: &Projection<T>) -> Result<(), ControlError> {
    if proj.distance_m > T::lit(OFF_TRACK_M) {
        return Err(ControlError::OffTrack {
            distance_m: proj.distance_m.to_f64_lossy(),
        });
    }
    Ok(())
}

/// Preview point at `lookahead` arc length past the pose's projection.
pub fn preview<T: Real>(
    pose: &VehicleState<T>,
    target: &PathTarget<T>,
    params: &VehicleParams<T>,
) -> Result<Preview<T>, ControlError> {
    let projection = target.path.project(Point::new(pose.x_m, pose.y_m));
    check_on_track(&projection)?;
    let point = target.path.point_at(projection.arc_m + target.lookahead_m);
    let (alpha_rad, distance_m, steer_rad) = pursue(pose, point, params);
    Ok(Preview {
        projection,
        target: point,
        alpha_rad,
        distance_m,
        steer_rad,
    })
}

/// Pure-pursuit steering toward the preview point, clamped to the steering
/// envelope.
pub fn preview_steer<T: Real>(
    pose: &VehicleState<T>,
    target: &PathTarget<T>,
    params: &VehicleParams<T>,
) -> Result<T, ControlError> {
    let p = preview(pose, target, params)?;
    Ok(params.steer_limit_rad().clamp(p.steer_rad))
}

/// Tunables of autonomous waypoint following.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaypointConfig<T> {
    pub lookahead_m: T,
    pub cruise_speed_mps: T,
    /// Speed is divided by `1 + curvature_slowdown_m·|κ|`.
    pub curvature_slowdown_m: T,
    /// Approach speed per metre of remaining path on open sequences.
    pub approach_gain_per_s: T,
}

impl<T: Real> Default for WaypointConfig<T> {
    fn default() -> Self {
        Self {
            lookahead_m: T::lit(0.4),
            cruise_speed_mps: T::lit(0.3),
            curvature_slowdown_m: T::lit(0.5),
            approach_gain_per_s: T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaypointCommand<T> {
    pub speed_mps: T,
    pub steer_rad: T,
    pub complete: bool,
}

/// Equidistant waypoint sequence compiled into a path.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointTrack<T> {
    waypoints: Vec<Point<T>>,
    /// Arc position of each waypoint on `path`.
    arcs: Vec<T>,
    path: Path<T>,
}

impl<T: Real> WaypointTrack<T> {
    pub fn new(waypoints: Vec<Point<T>>, looped: bool) -> Result<Self, ControlError> {
        let path = Path::new(waypoints.clone(), looped)?;
        let mut arcs = Vec::with_capacity(waypoints.len());
        let mut acc = T::zero();
        for (i, w) in waypoints.iter().enumerate() {
            if i > 0 {
                acc = acc + waypoints[i - 1].dist(w);
            }
            arcs.push(acc);
        }
        Ok(Self {
            waypoints,
            arcs,
            path,
        })
    }

    pub fn path(&self) -> &Path<T> {
        &self.path
    }

    pub fn waypoints(&self) -> &[Point<T>] {
        &self.waypoints
    }

    pub fn is_loop(&self) -> bool {
        self.path.is_closed()
    }

    /// First waypoint at least `lookahead` ahead of arc position `s`.
    fn select(&self, s: T, lookahead: T) -> Option<Point<T>> {
        let goal = s + lookahead;
        let idx = self.arcs.partition_point(|&a| a < goal);
        if idx < self.waypoints.len() {
            Some(self.waypoints[idx])
        } else if self.is_loop() {
            let wrapped = goal - self.path.length();
            let idx = self.arcs.partition_point(|&a| a < wrapped);
            Some(self.waypoints[idx.min(self.waypoints.len() - 1)])
        } else {
            None
        }
    }
}

/// Autonomous waypoint following: preview steering toward the first
/// waypoint past the lookahead, cruise speed reduced on curves.
pub fn waypoint_follow<T: Real>(
    pose: &VehicleState<T>,
    track: &WaypointTrack<T>,
    cfg: &WaypointConfig<T>,
    params: &VehicleParams<T>,
) -> Result<WaypointCommand<T>, ControlError> {
    let done = WaypointCommand {
        speed_mps: T::zero(),
        steer_rad: T::zero(),
        complete: true,
    };
    let here = Point::new(pose.x_m, pose.y_m);
    let projection = track.path.project(here);
    check_on_track(&projection)?;
    let remaining = track.path.length() - projection.arc_m;
    if !track.is_loop() {
        let last = *track.waypoints.last().unwrap();
        if here.dist(&last) <= T::lit(ARRIVAL_TOLERANCE_M) || remaining <= T::epsilon() {
            return Ok(done);
        }
    }
    let goal = match track.select(projection.arc_m, cfg.lookahead_m) {
        Some(g) => g,
        None => *track.waypoints.last().unwrap(),
    };
    let (alpha, dist, steer) = pursue(pose, goal, params);
    let steer = params.steer_limit_rad().clamp(steer);
    let curvature = if dist > T::epsilon() {
        (T::lit(2.0) * alpha.sin() / dist).abs()
    } else {
        T::zero()
    };
    let mut speed = cfg.cruise_speed_mps / (T::one() + cfg.curvature_slowdown_m * curvature);
    if !track.is_loop() {
        let to_end = remaining.max(here.dist(&track.path.end()));
        speed = speed.min(cfg.approach_gain_per_s * to_end);
    }
    Ok(WaypointCommand {
        speed_mps: params.speed_limit_mps.clamp(speed),
        steer_rad: steer,
        complete: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::Point;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p() -> VehicleParams<f64> {
        VehicleParams::default()
    }

    fn circle(r: f64, n: usize, closed: bool, span: f64) -> Vec<Point<f64>> {
        // Counter-clockwise circle around the origin starting at (r, 0).
        (0..n)
            .map(|k| {
                let a = span * k as f64 / if closed { n as f64 } else { (n - 1) as f64 };
                Point::new(r * a.cos(), r * a.sin())
            })
            .collect()
    }

    #[test]
    fn equilibrium_gives_zero_accel() {
        let g = PlatoonGains::default();
        assert_eq!(platoon_accel(0.2, 0.2, 0.2, 0.5, &g, &p()), 0.0);
    }

    #[test]
    fn spacing_only_substitution() {
        let g = PlatoonGains {
            k_p: 1.0,
            k_v1: 0.0,
            k_v2: 0.0,
            ..Default::default()
        };
        assert_relative_eq!(
            platoon_accel(0.2, 0.2, 0.2, 0.6, &g, &p()),
            0.1,
            epsilon = 1e-12
        );
        let v = next_speed(0.2, 0.1, &g, &p());
        assert_relative_eq!(v, 0.2125, epsilon = 1e-12);
    }

    #[test]
    fn huge_errors_saturate() {
        let g = PlatoonGains::default();
        assert_eq!(platoon_accel(0.0, 0.0, 0.0, 100.0, &g, &p()), 4.5);
        assert_eq!(platoon_accel(1.0, 0.0, 0.0, -100.0, &g, &p()), -4.5);
    }

    #[test]
    fn gains_validation() {
        let mut g = PlatoonGains::<f64>::default();
        g.validate(&p()).unwrap();
        g.s_des_m = 0.1;
        assert!(g.validate(&p()).is_err());
        let g = PlatoonGains {
            k_p: f64::NAN,
            ..Default::default()
        };
        assert!(g.validate(&p()).is_err());
    }

    #[test]
    fn aligned_on_straight_gives_zero_steer() {
        let path = Path::new(vec![Point::new(0.0, 0.0), Point::new(0.0, 5.0)], false).unwrap();
        let t = PathTarget::new(path, 0.4).unwrap();
        let pose = VehicleState::at(0.0, 1.0, 0.0, 0.3);
        assert_eq!(preview_steer(&pose, &t, &p()).unwrap(), 0.0);
    }

    #[test]
    fn circle_steady_state_steer() {
        let r = 0.85;
        let path = Path::new(circle(r, 2000, true, std::f64::consts::TAU), true).unwrap();
        let t = PathTarget::new(path, 0.4).unwrap();
        // At (r, 0) moving counter-clockwise means +y, i.e. θ = 0; the
        // circle bends toward -x, i.e. toward negative θ.
        let pose = VehicleState::at(r, 0.0, 0.0, 0.3);
        let steer = preview_steer(&pose, &t, &p()).unwrap();
        let oracle = -(0.15f64 / r).atan();
        assert_relative_eq!(oracle.to_degrees(), -10.0078, epsilon = 1e-3);
        assert!(
            (steer - oracle).abs().to_degrees() < 0.05,
            "{}",
            steer.to_degrees()
        );
    }

    #[test]
    fn sharp_preview_is_clamped() {
        // Target 90° to the right at 0.15 m demands atan(2) ≈ 63°.
        let path = Path::new(vec![Point::new(0.0, 0.0), Point::new(5.0, 0.0)], false).unwrap();
        let t = PathTarget::new(path, 0.15).unwrap();
        let pose = VehicleState::at(0.0, 0.0, 0.0, 0.3);
        let raw = preview(&pose, &t, &p()).unwrap().steer_rad;
        assert_relative_eq!(raw.to_degrees(), 2f64.atan().to_degrees(), epsilon = 1e-9);
        assert_relative_eq!(
            preview_steer(&pose, &t, &p()).unwrap().to_degrees(),
            40.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn off_track_is_an_error() {
        let path = Path::new(vec![Point::new(0.0, 0.0), Point::new(0.0, 5.0)], false).unwrap();
        let t = PathTarget::new(path, 0.4).unwrap();
        let pose = VehicleState::at(1.5, 1.0, 0.0, 0.3);
        assert!(matches!(
            preview_steer(&pose, &t, &p()),
            Err(ControlError::OffTrack { .. })
        ));
        assert!(PathTarget::new(t.path.clone(), 0.0).is_err());
    }

    #[test]
    fn straight_waypoints_cruise() {
        let wps: Vec<_> = (0..10).map(|k| Point::new(0.0, k as f64 * 0.2)).collect();
        let track = WaypointTrack::new(wps, false).unwrap();
        let cfg = WaypointConfig::default();
        let pose = VehicleState::at(0.0, 0.0, 0.0, 0.0);
        let cmd = waypoint_follow(&pose, &track, &cfg, &p()).unwrap();
        assert_eq!(cmd.steer_rad, 0.0);
        assert_eq!(cmd.speed_mps, cfg.cruise_speed_mps);
        assert!(!cmd.complete);

        let at_end = VehicleState::at(0.0, 1.8, 0.0, 0.2);
        assert!(
            waypoint_follow(&at_end, &track, &cfg, &p())
                .unwrap()
                .complete
        );
        let past_end = VehicleState::at(0.0, 2.3, 0.0, 0.2);
        assert!(
            waypoint_follow(&past_end, &track, &cfg, &p())
                .unwrap()
                .complete
        );
    }

    #[test]
    fn semicircle_waypoints_steady_steer() {
        let r = 0.85;
        let wps = circle(r, 60, false, std::f64::consts::PI);
        let track = WaypointTrack::new(wps, false).unwrap();
        let cfg = WaypointConfig::default();
        let pose = VehicleState::at(r, 0.0, 0.0, 0.3);
        let cmd = waypoint_follow(&pose, &track, &cfg, &p()).unwrap();
        assert!(
            (cmd.steer_rad.to_degrees() + 10.0).abs() < 0.1,
            "{}",
            cmd.steer_rad.to_degrees()
        );
        assert!(cmd.speed_mps < cfg.cruise_speed_mps);
    }

    proptest! {
        #[test]
        fn law_is_linear_before_saturation(
            ds in -0.3f64..0.3, dv1 in -0.2f64..0.2, dv2 in -0.2f64..0.2,
        ) {
            let g = PlatoonGains::default();
            let only = |s: f64, l: f64, pr: f64| platoon_accel_raw(0.2, 0.2 - pr, 0.2 - l, 0.5 + s, &g);
            let sum = only(ds, 0.0, 0.0) + only(0.0, dv1, 0.0) + only(0.0, 0.0, dv2);
            prop_assert!((only(ds, dv1, dv2) - sum).abs() < 1e-12);
        }

        #[test]
        fn gain_scaling_scales_accel(
            c in 0.01f64..5.0, s in 0.2f64..0.8, v in 0.0f64..0.3, vp in 0.0f64..0.3, vl in 0.0f64..0.3,
        ) {
            let g = PlatoonGains::default();
            let gc = PlatoonGains { k_p: g.k_p * c, k_v1: g.k_v1 * c, k_v2: g.k_v2 * c, ..g };
            let a = platoon_accel_raw(v, vp, vl, s, &g);
            let ac = platoon_accel_raw(v, vp, vl, s, &gc);
            prop_assert!((ac - c * a).abs() < 1e-12);
        }

        #[test]
        fn equilibrium_is_unique_fixed_point(
            s in 0.2f64..0.8, v in 0.0f64..0.3, vl in 0.0f64..0.3,
        ) {
            // A steady platoon has constant spacing (v = v_pred) and constant
            // speed (a = 0). Along those fixed points the law vanishes only
            // at the desired spacing with the leader's speed.
            let g = PlatoonGains::default();
            let a = platoon_accel_raw(v, v, v, s, &g);
            prop_assert_eq!(a == 0.0, s == 0.5);
            let a = platoon_accel_raw(v, v, vl, 0.5, &g);
            prop_assert_eq!(a == 0.0, v == vl);
        }

        #[test]
        fn steering_is_continuous_on_smooth_path(start in 0.0f64..20.0) {
            let table = crate::track::SandTable::<f64>::default();
            let t = PathTarget::new(table.track.clone(), 0.4).unwrap();
            let params = p();
            let v = 0.3;
            let pt = t.path.point_at(start);
            let mut pose = VehicleState::at(pt.x, pt.y, t.path.heading_at(start), v);
            let mut last = preview_steer(&pose, &t, &params).unwrap();
            for _ in 0..40 {
                let steer = preview_steer(&pose, &t, &params).unwrap();
                prop_assert!((steer - last).abs().to_degrees() <= 10.0);
                last = steer;
                for _ in 0..12 {
                    pose = crate::vehicle::step_bicycle(
                        &pose, &crate::vehicle::ControlInput::new(0.0, steer), 0.0104, &params,
                    ).unwrap();
                }
            }
        }
    }
}
