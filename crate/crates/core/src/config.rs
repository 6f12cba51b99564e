//! Run configuration, read from TOML. Every section has defaults, so an
//! empty file is a valid configuration.

use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::WaypointConfig;
use crate::cyber::MappingConfig;
use crate::emulator::EmulatorConfig;
use crate::hub::{NodeMapConfig, MAX_PAYLOAD_BYTES};
use crate::latency::LatencyModel;
use crate::scenario::ScenarioConfig;
use crate::track::TableGeometry;
use crate::{PlatoonGains, VehicleParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serializing config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HubConfig {
    pub tick_hz: u64,
    pub waypoint_spacing_m: f64,
    pub max_payload_bytes: usize,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            tick_hz: 100,
            waypoint_spacing_m: 0.1,
            max_payload_bytes: MAX_PAYLOAD_BYTES,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub gains: PlatoonGains,
    pub waypoint: WaypointConfig<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CyberConfig {
    pub tick_hz: u64,
    pub mapping: MappingConfig,
}

impl Default for CyberConfig {
    fn default() -> Self {
        Self {
            tick_hz: 100,
            mapping: MappingConfig::default(),
        }
    }
}

/// Whole-testbed configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TwinConfig {
    pub vehicle: VehicleParams,
    pub table: TableGeometry,
    pub latency: LatencyModel,
    pub emulator: EmulatorConfig,
    pub cyber: CyberConfig,
    pub hub: HubConfig,
    pub control: ControlConfig,
    pub scenario: ScenarioConfig,
    /// Calibrated node map; the built-in layout when absent.
    pub nodes: Option<NodeMapConfig>,
}

impl TwinConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: TwinConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &FsPath) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.vehicle.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.latency.validate() {
            return bad(e);
        }
        if let Err(e) = self.control.gains.validate(&self.vehicle) {
            return bad(e.to_string());
        }
        let e = &self.emulator;
        if e.capture_hz == 0 || e.command_hz == 0 || e.output_hz == 0 || e.output_hz > e.capture_hz
        {
            return bad("emulator rates must be positive with output ≤ capture".into());
        }
        if !(e.plant_dt_s > 0.0 && e.plant_dt_s <= crate::vehicle::MAX_STEP_S) {
            return bad(format!(
                "plant_dt_s must be in (0, {}]",
                crate::vehicle::MAX_STEP_S
            ));
        }
        if e.speed_lag_tau_s.is_some_and(|t| !(t > 0.0)) {
            return bad("speed_lag_tau_s must be positive".into());
        }
        if self.hub.tick_hz == 0 || self.cyber.tick_hz == 0 {
            return bad("tick rates must be positive".into());
        }
        if !(self.hub.waypoint_spacing_m > 0.0) {
            return bad("waypoint spacing must be positive".into());
        }
        self.scenario
            .validate(&self.vehicle)
            .map_err(ConfigError::Invalid)
    }
}
