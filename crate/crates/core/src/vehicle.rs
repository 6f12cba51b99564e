//! Kinematic bicycle model shared by every vehicle kind, plus the onboard
//! sandbox that saturates commands before they reach a plant.
//!
//! Axis convention: heading `θ = 0` points along `+Y`, and
//! `Ẋ = v·sin θ`, `Ẏ = v·cos θ`. This is swapped relative to the usual
//! ENU form; keep it in mind when comparing against other models.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{wrap_angle, Real};

/// Largest integration step accepted by [`step_bicycle`].
pub const MAX_STEP_S: f64 = 0.05;

/// Fixed integration step used by plants and cloud vehicles.
pub const DEFAULT_STEP_S: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite {0} passed to the vehicle model")]
    NonFinite(&'static str),
    #[error("integration step {0} s outside (0, {MAX_STEP_S}]")]
    InvalidStep(f64),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
}

/// Closed interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval<T> {
    pub min: T,
    pub max: T,
}

impl<T: Real> Interval<T> {
    pub fn new(min: T, max: T) -> Self {
        Self { min, max }
    }

    pub fn symmetric(half_width: T) -> Self {
        Self::new(-half_width, half_width)
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }

    #[inline]
    pub fn clamp(&self, v: T) -> T {
        v.max(self.min).min(self.max)
    }

    #[inline]
    pub fn contains(&self, v: T) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Geometry and actuation envelope of a miniature vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams<T> {
    pub wheelbase_m: T,
    pub steer_limit_deg: Interval<T>,
    pub speed_limit_mps: Interval<T>,
    pub accel_limit_mps2: Interval<T>,
    pub body_length_m: T,
    pub body_width_m: T,
}

impl<T: Real> Default for VehicleParams<T> {
    fn default() -> Self {
        Self {
            wheelbase_m: T::lit(0.15),
            steer_limit_deg: Interval::symmetric(T::lit(40.0)),
            speed_limit_mps: Interval::new(T::zero(), T::one()),
            accel_limit_mps2: Interval::symmetric(T::lit(4.5)),
            body_length_m: T::lit(0.200),
            body_width_m: T::lit(0.180),
        }
    }
}

impl<T: Real> VehicleParams<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.wheelbase_m.is_finite() && self.wheelbase_m > T::zero()) {
            return Err(ModelError::InvalidParams(format!(
                "wheelbase must be positive, got {}",
                self.wheelbase_m
            )));
        }
        for (name, iv) in [
            ("steer_limit_deg", self.steer_limit_deg),
            ("speed_limit_mps", self.speed_limit_mps),
            ("accel_limit_mps2", self.accel_limit_mps2),
        ] {
            if !iv.is_valid() {
                return Err(ModelError::InvalidParams(format!("{name} is empty")));
            }
        }
        if self.speed_limit_mps.min < T::zero() {
            return Err(ModelError::InvalidParams(
                "reverse motion is not modelled; speed_limit_mps.min must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Steering limits in radians.
    pub fn steer_limit_rad(&self) -> Interval<T> {
        Interval::new(
            self.steer_limit_deg.min.to_radians(),
            self.steer_limit_deg.max.to_radians(),
        )
    }

    /// Same envelope with the upper speed bound lowered to `cap` (never raised).
    pub fn with_speed_cap(mut self, cap: T) -> Self {
        self.speed_limit_mps.max = self.speed_limit_mps.max.min(cap);
        self
    }

    pub fn convert<U: Real>(&self) -> VehicleParams<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        let ci = |iv: Interval<T>| Interval::new(c(iv.min), c(iv.max));
        VehicleParams {
            wheelbase_m: c(self.wheelbase_m),
            steer_limit_deg: ci(self.steer_limit_deg),
            speed_limit_mps: ci(self.speed_limit_mps),
            accel_limit_mps2: ci(self.accel_limit_mps2),
            body_length_m: c(self.body_length_m),
            body_width_m: c(self.body_width_m),
        }
    }
}

/// Pose and speed of any vehicle, referenced to the rear-axle centre.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState<T> {
    pub x_m: T,
    pub y_m: T,
    pub heading_rad: T,
    pub speed_mps: T,
    pub steer_rad: T,
}

impl<T: Real> VehicleState<T> {
    pub fn at(x_m: T, y_m: T, heading_rad: T, speed_mps: T) -> Self {
        Self {
            x_m,
            y_m,
            heading_rad: wrap_angle(heading_rad),
            speed_mps,
            steer_rad: T::zero(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x_m.is_finite()
            && self.y_m.is_finite()
            && self.heading_rad.is_finite()
            && self.speed_mps.is_finite()
            && self.steer_rad.is_finite()
    }

    /// Unit vector of travel for the current heading.
    pub fn direction(&self) -> (T, T) {
        (self.heading_rad.sin(), self.heading_rad.cos())
    }
}

/// Actuator command: longitudinal acceleration and front-wheel angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput<T> {
    pub accel_mps2: T,
    pub steer_rad: T,
}

impl<T: Real> ControlInput<T> {
    pub fn new(accel_mps2: T, steer_rad: T) -> Self {
        Self {
            accel_mps2,
            steer_rad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.accel_mps2.is_finite() && self.steer_rad.is_finite()
    }
}

/// One explicit-Euler step of the kinematic bicycle model.
///
/// The steering command is applied instantaneously (within limits). Speed is
/// clamped to the envelope after the update and the heading is wrapped to
/// `[-π, π)`.
pub fn step_bicycle<T: Real>(
    state: &VehicleState<T>,
    input: &ControlInput<T>,
    dt: T,
    params: &VehicleParams<T>,
) -> Result<VehicleState<T>, ModelError> {
    if !state.is_finite() {
        return Err(ModelError::NonFinite("state"));
    }
    if !input.is_finite() {
        return Err(ModelError::NonFinite("input"));
    }
    if !(dt > T::zero() && dt <= T::lit(MAX_STEP_S)) {
        return Err(ModelError::InvalidStep(dt.to_f64_lossy()));
    }
    let steer = params.steer_limit_rad().clamp(input.steer_rad);
    let v = state.speed_mps;
    let (s, c) = state.heading_rad.sin_cos();
    let yaw_rate = steer.tan() * v / params.wheelbase_m;
    Ok(VehicleState {
        x_m: state.x_m + v * s * dt,
        y_m: state.y_m + v * c * dt,
        heading_rad: wrap_angle(state.heading_rad + yaw_rate * dt),
        speed_mps: params.speed_limit_mps.clamp(v + input.accel_mps2 * dt),
        steer_rad: steer,
    })
}

/// Which command fields the sandbox had to saturate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClampReport {
    pub speed: bool,
    pub steer: bool,
    pub accel: bool,
    /// A non-finite field was replaced by a safe value.
    pub non_finite: bool,
}

impl ClampReport {
    pub fn is_empty(&self) -> bool {
        !(self.speed || self.steer || self.accel || self.non_finite)
    }
}

/// Result of running a command through the sandbox.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped<T> {
    pub input: ControlInput<T>,
    pub speed_mps: T,
    pub report: ClampReport,
}

/// Onboard sandbox: saturates every command field into the vehicle envelope.
///
/// Total: non-finite fields are replaced by zero (safe stop, straight wheels)
/// and flagged.
pub fn sandbox_clamp<T: Real>(
    input: &ControlInput<T>,
    requested_speed: T,
    params: &VehicleParams<T>,
) -> Clamped<T> {
    let mut report = ClampReport::default();
    let mut field = |v: T, iv: Interval<T>, hit: &mut bool| -> T {
        if !v.is_finite() {
            report.non_finite = true;
            return iv.clamp(T::zero());
        }
        let c = iv.clamp(v);
        if c != v {
            *hit = true;
        }
        c
    };
    let (mut s, mut st, mut a) = (false, false, false);
    let speed_mps = field(requested_speed, params.speed_limit_mps, &mut s);
    let steer_rad = field(input.steer_rad, params.steer_limit_rad(), &mut st);
    let accel_mps2 = field(input.accel_mps2, params.accel_limit_mps2, &mut a);
    report.speed = s;
    report.steer = st;
    report.accel = a;
    Clamped {
        input: ControlInput {
            accel_mps2,
            steer_rad,
        },
        speed_mps,
        report,
    }
}

/// Acceleration that drives `speed` toward `target` with first-order time
/// constant `tau`, saturated to the accel envelope.
#[inline]
pub fn speed_tracking_accel<T: Real>(target: T, speed: T, tau: T, params: &VehicleParams<T>) -> T {
    params.accel_limit_mps2.clamp((target - speed) / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p() -> VehicleParams<f64> {
        VehicleParams::default()
    }

    #[test]
    fn defaults_match_envelope() {
        let p = p();
        assert_eq!(p.wheelbase_m, 0.15);
        assert_eq!(p.steer_limit_deg, Interval::new(-40.0, 40.0));
        assert_eq!(p.speed_limit_mps, Interval::new(0.0, 1.0));
        assert_eq!(p.accel_limit_mps2, Interval::new(-4.5, 4.5));
        assert_eq!((p.body_length_m, p.body_width_m), (0.2, 0.18));
        p.validate().unwrap();
    }

    #[test]
    fn invalid_params_rejected() {
        let mut bad = p();
        bad.wheelbase_m = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = p();
        bad.speed_limit_mps = Interval::new(1.0, 0.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn straight_line_step() {
        let s = VehicleState::at(0.0, 0.0, 0.0, 0.5);
        // 0.05 s is the step ceiling; two steps cover 0.1 s.
        let out = step_bicycle(&s, &ControlInput::new(0.0, 0.0), 0.05, &p()).unwrap();
        let out = step_bicycle(&out, &ControlInput::new(0.0, 0.0), 0.05, &p()).unwrap();
        assert_eq!(out.x_m, 0.0);
        assert_relative_eq!(out.y_m, 0.05, epsilon = 1e-15);
        assert_eq!(out.heading_rad, 0.0);
        assert_eq!(out.speed_mps, 0.5);
    }

    #[test]
    fn yaw_rate_at_full_lock() {
        let s = VehicleState::at(0.0, 0.0, 0.0, 1.0);
        let dt = 0.01;
        let out = step_bicycle(&s, &ControlInput::new(0.0, 40f64.to_radians()), dt, &p()).unwrap();
        // Independent evaluation: tan(40°) = 0.83909963117728, / 0.15.
        assert_relative_eq!(out.heading_rad / dt, 5.593997541181867, epsilon = 1e-9);
    }

    #[test]
    fn rejects_non_finite_and_bad_dt() {
        let s = VehicleState::at(0.0, 0.0, 0.0, 0.5);
        let ok = ControlInput::new(0.0, 0.0);
        assert_eq!(
            step_bicycle(&s, &ControlInput::new(f64::NAN, 0.0), 0.01, &p()),
            Err(ModelError::NonFinite("input"))
        );
        let mut bad = s;
        bad.x_m = f64::INFINITY;
        assert_eq!(
            step_bicycle(&bad, &ok, 0.01, &p()),
            Err(ModelError::NonFinite("state"))
        );
        assert!(matches!(
            step_bicycle(&s, &ok, 0.0, &p()),
            Err(ModelError::InvalidStep(_))
        ));
        assert!(matches!(
            step_bicycle(&s, &ok, 0.1, &p()),
            Err(ModelError::InvalidStep(_))
        ));
    }

    #[test]
    fn speed_never_negative() {
        let s = VehicleState::at(0.0, 0.0, 0.0, 0.01);
        let out = step_bicycle(&s, &ControlInput::new(-4.5, 0.0), 0.01, &p()).unwrap();
        assert_eq!(out.speed_mps, 0.0);
    }

    #[test]
    fn sandbox_examples() {
        let p = p();
        let c = sandbox_clamp(&ControlInput::new(0.0, 0.0), 1.5, &p);
        assert_eq!(c.speed_mps, 1.0);
        assert!(c.report.speed && !c.report.steer && !c.report.accel);

        let c = sandbox_clamp(&ControlInput::new(0.0, 55f64.to_radians()), 0.5, &p);
        assert_relative_eq!(c.input.steer_rad.to_degrees(), 40.0, epsilon = 1e-12);
        assert!(c.report.steer);

        let c = sandbox_clamp(&ControlInput::new(-6.0, 0.0), 0.5, &p);
        assert_eq!(c.input.accel_mps2, -4.5);
        assert!(c.report.accel);

        let input = ControlInput::new(1.0, 0.2);
        let c = sandbox_clamp(&input, 0.3, &p);
        assert_eq!(c.input, input);
        assert_eq!(c.speed_mps, 0.3);
        assert!(c.report.is_empty());
    }

    #[test]
    fn sandbox_replaces_nan() {
        let c = sandbox_clamp(&ControlInput::new(f64::NAN, f64::INFINITY), f64::NAN, &p());
        assert_eq!(c.input, ControlInput::new(0.0, 0.0));
        assert_eq!(c.speed_mps, 0.0);
        assert!(c.report.non_finite);
    }

    #[test]
    fn works_in_f32() {
        let p: VehicleParams<f32> = VehicleParams::default();
        let s = VehicleState::at(0.0f32, 0.0, 0.0, 0.5);
        let out = step_bicycle(&s, &ControlInput::new(0.0, 0.0), 0.01, &p).unwrap();
        assert!((out.y_m - 0.005).abs() < 1e-7);
    }

    proptest::proptest! {
        #[test]
        fn envelope_holds_for_any_inputs(
            v0 in 0.0f64..1.0,
            h in -3.1f64..3.1,
            inputs in proptest::collection::vec((-20.0f64..20.0, -3.0f64..3.0, -5.0f64..5.0), 1..50),
        ) {
            let p = p();
            let mut s = VehicleState::at(0.0, 0.0, h, v0);
            let lim = 40f64.to_radians() + 1e-12;
            for (a, st, sp) in inputs {
                let c = sandbox_clamp(&ControlInput::new(a, st), sp, &p);
                proptest::prop_assert!(c.speed_mps >= 0.0 && c.speed_mps <= 1.0);
                s = step_bicycle(&s, &c.input, 0.01, &p).unwrap();
                proptest::prop_assert!(s.speed_mps >= 0.0 && s.speed_mps <= 1.0);
                proptest::prop_assert!(s.steer_rad.abs() <= lim);
                proptest::prop_assert!(s.heading_rad >= -std::f64::consts::PI && s.heading_rad < std::f64::consts::PI);
            }
        }

        #[test]
        fn straight_motion_preserves_heading_and_speed(
            h in -3.1f64..3.1, v in 0.0f64..1.0, n in 1usize..200,
        ) {
            let p = p();
            let mut s = VehicleState::at(1.0, 2.0, h, v);
            let h0 = s.heading_rad;
            for _ in 0..n {
                s = step_bicycle(&s, &ControlInput::new(0.0, 0.0), 0.01, &p).unwrap();
            }
            proptest::prop_assert_eq!(s.heading_rad, h0);
            proptest::prop_assert_eq!(s.speed_mps, v);
        }

        #[test]
        fn step_is_deterministic(
            x in -5.0f64..5.0, v in 0.0f64..1.0, a in -4.5f64..4.5, st in -0.6f64..0.6,
        ) {
            let p = p();
            let s = VehicleState::at(x, -x, 0.3, v);
            let i = ControlInput::new(a, st);
            let o1 = step_bicycle(&s, &i, 0.01, &p).unwrap();
            let o2 = step_bicycle(&s, &i, 0.01, &p).unwrap();
            proptest::prop_assert_eq!(o1.x_m.to_bits(), o2.x_m.to_bits());
            proptest::prop_assert_eq!(o1.y_m.to_bits(), o2.y_m.to_bits());
            proptest::prop_assert_eq!(o1.heading_rad.to_bits(), o2.heading_rad.to_bits());
            proptest::prop_assert_eq!(o1.speed_mps.to_bits(), o2.speed_mps.to_bits());
        }
    }
}
