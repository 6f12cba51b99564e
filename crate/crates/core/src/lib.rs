//! Digital twin of a sand-table multi-vehicle testbed.
//!
//! The math core (vehicle model, paths, controllers) is generic over the
//! scalar type; the aliases below fix it to `f64`, with `f32` variants for
//! embedded-style use. The runtime layers are concrete `f64`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod clock;
pub mod config;
pub mod control;
pub mod cyber;
pub mod emulator;
pub mod hub;
pub mod latency;
pub mod modes;
pub mod scalar;
pub mod scenario;
pub mod server;
pub mod telemetry;
pub mod track;
pub mod vehicle;
pub mod wire;
pub mod world;

pub type VehicleState = vehicle::VehicleState<f64>;
pub type VehicleParams = vehicle::VehicleParams<f64>;
pub type ControlInput = vehicle::ControlInput<f64>;
pub type Point = track::Point<f64>;
pub type Path = track::Path<f64>;
pub type SandTable = track::SandTable<f64>;
pub type PlatoonGains = control::PlatoonGains<f64>;

pub type VehicleState32 = vehicle::VehicleState<f32>;
pub type VehicleParams32 = vehicle::VehicleParams<f32>;
pub type ControlInput32 = vehicle::ControlInput<f32>;
pub type Point32 = track::Point<f32>;
pub type Path32 = track::Path<f32>;
