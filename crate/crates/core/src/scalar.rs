//! Scalar abstraction for the geometric and kinematic code.
//!
//! The vehicle model, track geometry and control laws are written once over
//! [`Real`] and instantiated for `f64` (the default used by the simulator) and
//! `f32` (useful for embedded-style workstation code).

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle<T: Real>(angle: T) -> T {
    if angle >= -T::PI() && angle < T::PI() {
        return angle;
    }
    let two_pi = T::PI() + T::PI();
    let mut a = (angle + T::PI()) % two_pi;
    if a < T::zero() {
        a = a + two_pi;
    }
    let out = a - T::PI();
    // `%` can round up to exactly π for inputs just below -π.
    if out >= T::PI() {
        out - two_pi
    } else {
        out
    }
}

#[inline]
pub fn deg<T: Real>(degrees: f64) -> T {
    T::lit(degrees.to_radians())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-7.0 * PI) + PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25f32), 0.25f32);
        assert_eq!(wrap_angle(0.05f64), 0.05f64);
    }

    proptest::proptest! {
        #[test]
        fn wrap_angle_is_half_open(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            proptest::prop_assert!((-PI..PI).contains(&w));
            let k = ((a - w) / (2.0 * PI)).round();
            proptest::prop_assert!((a - w - k * 2.0 * PI).abs() < 1e-9);
        }
    }
}
