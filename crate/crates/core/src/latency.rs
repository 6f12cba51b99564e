//! Per-stage transport delay model.
//!
//! Five data-flow stages are measured on the testbed:
//!
//! | stage | flow                                   |
//! |-------|----------------------------------------|
//! | 1     | overhead camera → workstation          |
//! | 2     | workstation → cloud → cyber-space host |
//! | 3     | cloud → workstation                    |
//! | 4     | workstation → miniature vehicle        |
//! | 5     | cloud → cyber-space host               |
//!
//! Each stage is described by its summary statistics. Samples are drawn
//! from a log-normal whose mean and 99th percentile match the stage, then
//! clamped to the stage's observed `[min, max]`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

/// Standard normal quantile at 0.99.
pub const Z_99: f64 = 2.326_347_874_040_841;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    CameraToWorkstation = 1,
    WorkstationToCyber = 2,
    HubToWorkstation = 3,
    WorkstationToVehicle = 4,
    HubToCyber = 5,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::CameraToWorkstation,
        Stage::WorkstationToCyber,
        Stage::HubToWorkstation,
        Stage::WorkstationToVehicle,
        Stage::HubToCyber,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    /// Whether the flow passes through the hub (and so gets a hub-arrival
    /// stamp distinct from the send time).
    pub fn via_hub(self) -> bool {
        matches!(self, Stage::WorkstationToCyber)
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Stage::ALL
            .get((v as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| format!("stage must be 1..=5, got {v}"))
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}", self.number())
    }
}

/// Summary statistics of one stage, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub sample_size: u32,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub min_ms: f64,
    pub p99_ms: f64,
}

impl StageStats {
    pub const fn new(
        sample_size: u32,
        mean_ms: f64,
        max_ms: f64,
        min_ms: f64,
        p99_ms: f64,
    ) -> Self {
        Self {
            sample_size,
            mean_ms,
            max_ms,
            min_ms,
            p99_ms,
        }
    }

    pub const fn constant(ms: f64) -> Self {
        Self::new(0, ms, ms, ms, ms)
    }

    /// Log-normal parameters `(mu, sigma)` matching the mean and p99.
    ///
    /// Returns `None` for a degenerate stage (non-positive mean), which
    /// always samples `min_ms`.
    pub fn lognormal_fit(&self) -> Option<(f64, f64)> {
        if !(self.mean_ms > 0.0) || self.max_ms <= self.min_ms {
            return None;
        }
        // mean = exp(mu + s²/2), p99 = exp(mu + z·s)  =>  s²/2 - z·s + ln(p99/mean) = 0
        let ratio = (self.p99_ms / self.mean_ms).max(1.0).ln();
        let disc = Z_99 * Z_99 - 2.0 * ratio;
        let sigma = if disc > 0.0 { Z_99 - disc.sqrt() } else { Z_99 };
        let mu = self.mean_ms.ln() - sigma * sigma / 2.0;
        Some((mu, sigma))
    }
}

/// Delay statistics for all five stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub stage1: StageStats,
    pub stage2: StageStats,
    pub stage3: StageStats,
    pub stage4: StageStats,
    pub stage5: StageStats,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            stage1: StageStats::new(1200, 49.7, 69.0, 39.0, 67.0),
            stage2: StageStats::new(1200, 11.7, 61.0, 3.0, 26.0),
            stage3: StageStats::new(1200, 14.7, 97.0, 4.0, 66.0),
            stage4: StageStats::new(641, 8.4, 61.4, 2.9, 16.0),
            stage5: StageStats::new(1200, 8.3, 141.0, 4.0, 23.0),
        }
    }
}

impl LatencyModel {
    /// Every stage delivers instantly.
    pub fn zero() -> Self {
        let z = StageStats::constant(0.0);
        Self {
            stage1: z,
            stage2: z,
            stage3: z,
            stage4: z,
            stage5: z,
        }
    }

    pub fn stats(&self, stage: Stage) -> &StageStats {
        match stage {
            Stage::CameraToWorkstation => &self.stage1,
            Stage::WorkstationToCyber => &self.stage2,
            Stage::HubToWorkstation => &self.stage3,
            Stage::WorkstationToVehicle => &self.stage4,
            Stage::HubToCyber => &self.stage5,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for stage in Stage::ALL {
            let s = self.stats(stage);
            let vals = [s.mean_ms, s.min_ms, s.max_ms, s.p99_ms];
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(format!(
                    "{stage}: statistics must be finite and non-negative"
                ));
            }
            if s.min_ms > s.max_ms {
                return Err(format!("{stage}: min exceeds max"));
            }
        }
        Ok(())
    }
}

/// Draws one delay for `stage`, in milliseconds, always inside
/// `[min_ms, max_ms]`.
pub fn sample_latency<R: Rng + ?Sized>(stage: Stage, model: &LatencyModel, rng: &mut R) -> f64 {
    let s = model.stats(stage);
    match s.lognormal_fit() {
        None => s.min_ms,
        Some((mu, sigma)) => {
            let draw = if sigma > 0.0 {
                LogNormal::new(mu, sigma)
                    .expect("finite log-normal parameters")
                    .sample(rng)
            } else {
                mu.exp()
            };
            draw.clamp(s.min_ms, s.max_ms)
        }
    }
}
