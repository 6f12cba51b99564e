//! Virtual time.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// Virtual timestamp in whole microseconds since the start of a run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round().max(0.0) as u64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        SimTime((ms * 1e3).round().max(0.0) as u64)
    }

    pub fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 * 1e-3
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

/// Start time of tick `k` of a periodic schedule at `hz`, rounded to the
/// microsecond grid without drift.
pub fn tick_time(k: u64, hz: u64) -> SimTime {
    SimTime((k * 1_000_000 + hz / 2) / hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_grid_has_no_drift() {
        assert_eq!(tick_time(30, 30), SimTime(1_000_000));
        assert_eq!(tick_time(1, 30), SimTime(33_333));
        assert_eq!(tick_time(2, 30), SimTime(66_667));
        assert_eq!(tick_time(8, 8), SimTime(1_000_000));
        assert_eq!(tick_time(1, 8), SimTime(125_000));
    }

    #[test]
    fn conversions() {
        assert_eq!(SimTime::from_millis_f64(49.7), SimTime(49_700));
        assert_eq!(SimTime::from_secs_f64(0.125).as_millis_f64(), 125.0);
        assert_eq!(SimTime(5).saturating_sub(SimTime(9)), SimTime::ZERO);
    }
}
