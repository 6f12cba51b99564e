//! Identifiers and world-state records shared by the hub, the cyber space
//! and external clients.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clock::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Physical miniature or purely virtual cloud vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VehicleKind {
    #[serde(rename = "P")]
    Physical,
    #[serde(rename = "V")]
    Virtual,
}

impl VehicleKind {
    pub fn letter(self) -> char {
        match self {
            VehicleKind::Physical => 'P',
            VehicleKind::Virtual => 'V',
        }
    }

    /// How the vehicle is represented in cyber space.
    pub fn record_kind(self) -> RecordKind {
        match self {
            VehicleKind::Physical => RecordKind::Mapping,
            VehicleKind::Virtual => RecordKind::Cloud,
        }
    }
}

impl fmt::Display for VehicleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// Mirror of a physical vehicle, driven by observations.
    Mapping,
    /// Simulated vehicle with no physical counterpart.
    Cloud,
}

/// One vehicle as seen by the cyber space at a point in virtual time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: VehicleId,
    pub kind: RecordKind,
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
    pub speed_mps: f64,
    /// Virtual time the underlying data refers to.
    pub stamp: SimTime,
}

/// Consistent view of every vehicle at one virtual instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub seq: u64,
    pub time: SimTime,
    pub vehicles: Vec<VehicleRecord>,
}

impl WorldSnapshot {
    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleRecord> {
        self.vehicles.iter().find(|r| r.id == id)
    }
}
