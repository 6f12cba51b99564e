//! Physical side of the sand table: miniature-vehicle plants, the overhead
//! vision system and the workstation command loop.
//!
//! Image formation and colour-block detection are not simulated; the vision
//! system samples ground truth at the capture rate and emits noisy poses at
//! the output rate, late by a stage-1 delay.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::clock::{tick_time, SimTime};
use crate::control::{ControlError, WaypointConfig};
use crate::latency::{sample_latency, LatencyModel, Stage};
use crate::modes::{ModeKind, ResolvedMode, VehicleCommand, VehicleController};
use crate::vehicle::{sandbox_clamp, speed_tracking_accel, step_bicycle, ClampReport, ModelError};
use crate::world::VehicleId;
use crate::{ControlInput, SandTable, VehicleParams, VehicleState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmulatorError {
    #[error("noise model: {0}")]
    Noise(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
}

/// Absolute-error statistics of one localization axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisNoise {
    pub mean_abs_m: f64,
    pub max_abs_m: f64,
}

/// `E|e|` of a zero-mean Gaussian with std `sigma` truncated to `±bound`.
pub fn truncated_mean_abs(sigma: f64, bound: f64) -> f64 {
    let c = bound / sigma;
    sigma * (2.0 / std::f64::consts::PI).sqrt() * (1.0 - (-c * c / 2.0).exp())
        / erf(c / std::f64::consts::SQRT_2)
}

impl AxisNoise {
    /// Standard deviation of the untruncated Gaussian whose truncation to
    /// `±max_abs_m` has mean absolute value `mean_abs_m`.
    pub fn sigma(&self) -> Result<f64, EmulatorError> {
        let (m, b) = (self.mean_abs_m, self.max_abs_m);
        if !(m > 0.0 && b > 0.0) {
            return Err(EmulatorError::Noise("mean and max must be positive".into()));
        }
        // The truncated mean-abs rises monotonically from 0 toward b/2
        // (the uniform limit) as sigma grows.
        if m >= b / 2.0 {
            return Err(EmulatorError::Noise(format!(
                "mean |e| {m} must be below half the bound {b}"
            )));
        }
        let (mut lo, mut hi) = (1e-9, b);
        while truncated_mean_abs(hi, b) < m {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if truncated_mean_abs(mid, b) < m {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Zero-mean Gaussian truncated to `±bound`, sampled by rejection.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedGaussian {
    normal: Normal<f64>,
    bound: f64,
}

impl TruncatedGaussian {
    pub fn new(sigma: f64, bound: f64) -> Result<Self, EmulatorError> {
        let normal = Normal::new(0.0, sigma).map_err(|e| EmulatorError::Noise(e.to_string()))?;
        Ok(Self { normal, bound })
    }

    pub fn from_axis(axis: &AxisNoise) -> Result<Self, EmulatorError> {
        Self::new(axis.sigma()?, axis.max_abs_m)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let v = self.normal.sample(rng);
            if v.abs() <= self.bound {
                return v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub enabled: bool,
    pub x: AxisNoise,
    pub y: AxisNoise,
    /// Heading noise std (untruncated); zero disables it.
    pub heading_sigma_rad: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            enabled: true,
            x: AxisNoise {
                mean_abs_m: 0.0171,
                max_abs_m: 0.041,
            },
            y: AxisNoise {
                mean_abs_m: 0.0149,
                max_abs_m: 0.043,
            },
            heading_sigma_rad: 0.0,
        }
    }
}

/// Emulator timing and plant tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmulatorConfig {
    pub capture_hz: u64,
    pub output_hz: u64,
    pub command_hz: u64,
    pub plant_dt_s: f64,
    /// First-order speed lag of the miniature plant; `None` disables it.
    pub speed_lag_tau_s: Option<f64>,
    /// Std of the per-step speed disturbance of a moving miniature.
    pub speed_jitter_mps: f64,
    pub stale_after_s: f64,
    pub noise: NoiseModel,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            capture_hz: 30,
            output_hz: 8,
            command_hz: 8,
            plant_dt_s: 0.01,
            speed_lag_tau_s: Some(0.3),
            speed_jitter_mps: 0.0003,
            stale_after_s: 0.5,
            noise: NoiseModel::default(),
        }
    }
}

/// Physical miniature vehicle with a lagged speed response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiniatureVehicle {
    pub id: VehicleId,
    pub state: VehicleState,
    pub commanded_speed_mps: f64,
    pub commanded_steer_rad: f64,
    pub speed_lag_tau_s: Option<f64>,
    pub params: VehicleParams,
}

impl MiniatureVehicle {
    pub fn new(
        id: VehicleId,
        state: VehicleState,
        params: VehicleParams,
        tau: Option<f64>,
    ) -> Self {
        Self {
            id,
            state,
            commanded_speed_mps: state.speed_mps,
            commanded_steer_rad: 0.0,
            speed_lag_tau_s: tau,
            params,
        }
    }

    /// Onboard sandbox: stores the saturated command.
    pub fn receive(&mut self, speed_mps: f64, steer_rad: f64) -> ClampReport {
        let c = sandbox_clamp(&ControlInput::new(0.0, steer_rad), speed_mps, &self.params);
        self.commanded_speed_mps = c.speed_mps;
        self.commanded_steer_rad = c.input.steer_rad;
        c.report
    }
}

/// One plant step: the speed lag produces an acceleration request,
/// saturated to the envelope, then the bicycle model advances.
pub fn plant_step(vehicle: &MiniatureVehicle, dt: f64) -> Result<MiniatureVehicle, ModelError> {
    let tau = vehicle.speed_lag_tau_s.unwrap_or(dt);
    let accel = speed_tracking_accel(
        vehicle.commanded_speed_mps,
        vehicle.state.speed_mps,
        tau,
        &vehicle.params,
    );
    let input = ControlInput::new(accel, vehicle.commanded_steer_rad);
    let mut next = *vehicle;
    next.state = step_bicycle(&vehicle.state, &input, dt, &vehicle.params)?;
    Ok(next)
}

/// [`plant_step`] followed by an additive speed disturbance, applied only
/// while the vehicle is commanded to move.
pub fn plant_step_disturbed(
    vehicle: &MiniatureVehicle,
    dt: f64,
    disturbance_mps: f64,
) -> Result<MiniatureVehicle, ModelError> {
    let mut next = plant_step(vehicle, dt)?;
    if vehicle.commanded_speed_mps > 0.0 && disturbance_mps != 0.0 {
        next.state.speed_mps = vehicle
            .params
            .speed_limit_mps
            .clamp(next.state.speed_mps + disturbance_mps);
    }
    Ok(next)
}

/// Localization fix produced by the overhead vision system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseObservation {
    pub vehicle_id: VehicleId,
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
    pub capture_time: SimTime,
    pub emit_time: SimTime,
    #[serde(default)]
    pub out_of_bounds: bool,
}

impl PoseObservation {
    pub fn pose(&self) -> VehicleState {
        VehicleState::at(self.x_m, self.y_m, self.heading_rad, 0.0)
    }
}

/// Observations from one processed frame, with the ground truth they were
/// derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionFrame {
    pub frame: u64,
    pub capture_time: SimTime,
    pub emit_time: SimTime,
    pub observations: Vec<PoseObservation>,
    pub truth: Vec<VehicleState>,
}

/// Overhead cameras plus pose extraction.
#[derive(Debug, Clone)]
pub struct VisionSystem {
    capture_hz: u64,
    output_hz: u64,
    noise_enabled: bool,
    x_noise: TruncatedGaussian,
    y_noise: TruncatedGaussian,
    heading_noise: Option<Normal<f64>>,
    frames: u64,
    outputs: u64,
}

impl VisionSystem {
    pub fn new(cfg: &EmulatorConfig) -> Result<Self, EmulatorError> {
        if cfg.capture_hz == 0 || cfg.output_hz == 0 || cfg.output_hz > cfg.capture_hz {
            return Err(EmulatorError::Noise(
                "output rate must be in 1..=capture rate".into(),
            ));
        }
        let heading_noise = if cfg.noise.heading_sigma_rad > 0.0 {
            Some(
                Normal::new(0.0, cfg.noise.heading_sigma_rad)
                    .map_err(|e| EmulatorError::Noise(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            capture_hz: cfg.capture_hz,
            output_hz: cfg.output_hz,
            noise_enabled: cfg.noise.enabled,
            x_noise: TruncatedGaussian::from_axis(&cfg.noise.x)?,
            y_noise: TruncatedGaussian::from_axis(&cfg.noise.y)?,
            heading_noise,
            frames: 0,
            outputs: 0,
        })
    }

    /// Virtual time of capture frame `k`.
    pub fn capture_time(&self, k: u64) -> SimTime {
        tick_time(k, self.capture_hz)
    }

    /// Whether frame `k` finishes processing and is emitted. Exactly
    /// `output_hz` of every `capture_hz` frames are emitted, spread evenly.
    pub fn is_output_frame(&self, k: u64) -> bool {
        k == 0
            || (k * self.output_hz) / self.capture_hz
                != ((k - 1) * self.output_hz) / self.capture_hz
    }

    pub fn frames_captured(&self) -> u64 {
        self.frames
    }

    pub fn frames_emitted(&self) -> u64 {
        self.outputs
    }

    /// Captures the next frame. Returns the processed observations when the
    /// frame is an output frame.
    pub fn capture<R: Rng + ?Sized>(
        &mut self,
        truth: &[(VehicleId, VehicleState)],
        table: &SandTable,
        latency: &LatencyModel,
        rng: &mut R,
    ) -> Option<VisionFrame> {
        let k = self.frames;
        self.frames += 1;
        if !self.is_output_frame(k) {
            return None;
        }
        self.outputs += 1;
        let capture_time = self.capture_time(k);
        let delay = sample_latency(Stage::CameraToWorkstation, latency, rng);
        let emit_time = capture_time + SimTime::from_millis_f64(delay);
        let observations = truth
            .iter()
            .map(|(id, s)| {
                let (dx, dy, dh) = if self.noise_enabled {
                    (
                        self.x_noise.sample(rng),
                        self.y_noise.sample(rng),
                        self.heading_noise.map_or(0.0, |n| n.sample(rng)),
                    )
                } else {
                    (0.0, 0.0, 0.0)
                };
                PoseObservation {
                    vehicle_id: *id,
                    x_m: s.x_m + dx,
                    y_m: s.y_m + dy,
                    heading_rad: crate::scalar::wrap_angle(s.heading_rad + dh),
                    capture_time,
                    emit_time,
                    out_of_bounds: !table.contains(s.x_m, s.y_m),
                }
            })
            .collect();
        Some(VisionFrame {
            frame: k,
            capture_time,
            emit_time,
            observations,
            truth: truth.iter().map(|(_, s)| *s).collect(),
        })
    }
}

/// Command leaving the workstation for one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchedCommand {
    pub vehicle_id: VehicleId,
    pub speed_mps: f64,
    pub steer_rad: f64,
    pub clamp: ClampReport,
}

struct Station {
    controller: VehicleController,
    params: VehicleParams,
    latest: Option<PoseObservation>,
    held: DispatchedCommand,
    sent: u64,
    stale_holds: u64,
    errors: u64,
}

/// Workstation: turns observations and active modes into sandboxed
/// speed/steer commands at the command rate.
pub struct Workstation {
    stations: BTreeMap<VehicleId, Station>,
    stale_after: SimTime,
}

impl Workstation {
    pub fn new(cfg: &EmulatorConfig) -> Self {
        Self {
            stations: BTreeMap::new(),
            stale_after: SimTime::from_secs_f64(cfg.stale_after_s),
        }
    }

    pub fn register(&mut self, id: VehicleId, params: VehicleParams, cfg: WaypointConfig<f64>) {
        self.stations.insert(
            id,
            Station {
                controller: VehicleController::new(cfg),
                params,
                latest: None,
                held: DispatchedCommand {
                    vehicle_id: id,
                    speed_mps: 0.0,
                    steer_rad: 0.0,
                    clamp: ClampReport::default(),
                },
                sent: 0,
                stale_holds: 0,
                errors: 0,
            },
        );
    }

    fn station(&mut self, id: VehicleId) -> Result<&mut Station, EmulatorError> {
        self.stations
            .get_mut(&id)
            .ok_or(EmulatorError::UnknownVehicle(id))
    }

    /// Keeps the newest fix per vehicle; older captures are ignored.
    pub fn on_observation(&mut self, obs: PoseObservation) -> Result<(), EmulatorError> {
        let st = self.station(obs.vehicle_id)?;
        if st.latest.is_none_or(|l| l.capture_time <= obs.capture_time) {
            st.latest = Some(obs);
        }
        Ok(())
    }

    pub fn on_mode(&mut self, id: VehicleId, mode: ResolvedMode) -> Result<(), EmulatorError> {
        self.station(id)?
            .controller
            .schedule(mode)
            .map_err(|e| EmulatorError::Noise(e.to_string()))
    }

    pub fn on_command(&mut self, cmd: &VehicleCommand) -> Result<bool, EmulatorError> {
        Ok(self.station(cmd.vehicle_id)?.controller.command(cmd))
    }

    pub fn mode_kind(&self, id: VehicleId) -> Option<ModeKind> {
        self.stations.get(&id).map(|s| s.controller.mode_kind())
    }

    pub fn commands_sent(&self, id: VehicleId) -> u64 {
        self.stations.get(&id).map_or(0, |s| s.sent)
    }

    pub fn stale_holds(&self, id: VehicleId) -> u64 {
        self.stations.get(&id).map_or(0, |s| s.stale_holds)
    }

    pub fn control_errors(&self, id: VehicleId) -> u64 {
        self.stations.get(&id).map_or(0, |s| s.errors)
    }

    /// One command tick: every registered vehicle gets exactly one command.
    /// Without a usable fix the previous command is held.
    pub fn tick(&mut self, now: SimTime) -> Vec<DispatchedCommand> {
        let stale_after = self.stale_after;
        let mut out = Vec::with_capacity(self.stations.len());
        for (id, st) in self.stations.iter_mut() {
            st.controller.apply_pending();
            let needs_pose = st.controller.mode_kind() != ModeKind::Direct;
            let fresh = match st.latest {
                Some(obs) if now.saturating_sub(obs.capture_time) > stale_after => {
                    if needs_pose {
                        st.stale_holds += 1;
                    }
                    None
                }
                other => other,
            };
            let pose = fresh.map(|o| o.pose());
            let result: Result<Option<_>, ControlError> = if needs_pose && pose.is_none() {
                Ok(None)
            } else {
                st.controller.evaluate(pose.as_ref(), &st.params)
            };
            match result {
                Ok(Some(cmd)) => {
                    let c = sandbox_clamp(
                        &ControlInput::new(0.0, cmd.steer_rad),
                        cmd.speed_mps,
                        &st.params,
                    );
                    st.held = DispatchedCommand {
                        vehicle_id: *id,
                        speed_mps: c.speed_mps,
                        steer_rad: c.input.steer_rad,
                        clamp: c.report,
                    };
                }
                Ok(None) => {}
                Err(_) => {
                    // Off-track: stop rather than steer blindly.
                    st.errors += 1;
                    st.held.speed_mps = 0.0;
                }
            }
            st.sent += 1;
            out.push(st.held);
        }
        out
    }
}

/// All physical vehicles, the vision system and the emulator's random
/// stream.
pub struct PhysicalSpace {
    pub cfg: EmulatorConfig,
    pub table: SandTable,
    pub vehicles: BTreeMap<VehicleId, MiniatureVehicle>,
    pub vision: VisionSystem,
    jitter: Option<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl PhysicalSpace {
    pub fn new(
        cfg: EmulatorConfig,
        table: SandTable,
        rng: ChaCha8Rng,
    ) -> Result<Self, EmulatorError> {
        let jitter = if cfg.speed_jitter_mps > 0.0 {
            Some(
                Normal::new(0.0, cfg.speed_jitter_mps)
                    .map_err(|e| EmulatorError::Noise(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            vision: VisionSystem::new(&cfg)?,
            cfg,
            table,
            vehicles: BTreeMap::new(),
            jitter,
            rng,
        })
    }

    pub fn spawn(&mut self, id: VehicleId, state: VehicleState, params: VehicleParams) {
        self.vehicles.insert(
            id,
            MiniatureVehicle::new(id, state, params, self.cfg.speed_lag_tau_s),
        );
    }

    pub fn deliver_command(
        &mut self,
        cmd: &DispatchedCommand,
    ) -> Result<ClampReport, EmulatorError> {
        let v = self
            .vehicles
            .get_mut(&cmd.vehicle_id)
            .ok_or(EmulatorError::UnknownVehicle(cmd.vehicle_id))?;
        Ok(v.receive(cmd.speed_mps, cmd.steer_rad))
    }

    /// Advances every plant by one fixed step.
    pub fn step(&mut self) -> Result<(), EmulatorError> {
        let dt = self.cfg.plant_dt_s;
        for v in self.vehicles.values_mut() {
            let d = self.jitter.map_or(0.0, |n| n.sample(&mut self.rng));
            *v = plant_step_disturbed(v, dt, d)?;
        }
        Ok(())
    }

    pub fn truth(&self) -> Vec<(VehicleId, VehicleState)> {
        self.vehicles.iter().map(|(id, v)| (*id, v.state)).collect()
    }

    pub fn capture(&mut self, latency: &LatencyModel) -> Option<VisionFrame> {
        let truth = self.truth();
        self.vision
            .capture(&truth, &self.table, latency, &mut self.rng)
    }

    /// Stage-4 transport delay for a command, in milliseconds.
    pub fn command_delay_ms(&mut self, latency: &LatencyModel) -> f64 {
        sample_latency(Stage::WorkstationToVehicle, latency, &mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn mv(tau: Option<f64>) -> MiniatureVehicle {
        MiniatureVehicle::new(
            VehicleId(1),
            VehicleState::at(1.0, 1.0, 0.0, 0.0),
            VehicleParams::default(),
            tau,
        )
    }

    #[test]
    fn first_order_step_response() {
        let mut v = mv(Some(0.3));
        v.receive(0.26, 0.0);
        for _ in 0..30 {
            v = plant_step(&v, 0.01).unwrap();
        }
        // Closed form 0.26·(1 − e⁻¹) = 0.16435; Euler at dt/τ = 1/30 lands
        // within 1.5 %.
        let oracle = 0.26 * (1.0 - (-1.0f64).exp());
        assert_relative_eq!(v.state.speed_mps, oracle, max_relative = 0.015);
    }

    #[test]
    fn equilibrium_command_keeps_speed() {
        let mut v = mv(Some(0.3));
        v.state.speed_mps = 0.2;
        v.receive(0.2, 0.0);
        let n = plant_step(&v, 0.01).unwrap();
        assert_eq!(n.state.speed_mps, 0.2);
    }

    #[test]
    fn first_step_accel_saturates() {
        // (1.0 − 0)/τ = 10 m/s² exceeds the 4.5 m/s² envelope.
        let mut v = mv(Some(0.1));
        v.receive(1.0, 0.0);
        let n = plant_step(&v, 0.01).unwrap();
        assert_relative_eq!(n.state.speed_mps, 0.045, epsilon = 1e-12);
    }

    #[test]
    fn monotone_approach_without_saturation() {
        let mut v = mv(Some(0.3));
        v.receive(0.26, 0.0);
        let mut last = v.state.speed_mps;
        for _ in 0..300 {
            v = plant_step(&v, 0.01).unwrap();
            assert!(v.state.speed_mps > last && v.state.speed_mps < 0.26);
            last = v.state.speed_mps;
        }
    }

    #[test]
    fn sigma_solver_matches_mean_abs() {
        let n = NoiseModel::default();
        let sx = n.x.sigma().unwrap();
        let sy = n.y.sigma().unwrap();
        assert_relative_eq!(truncated_mean_abs(sx, 0.041), 0.0171, epsilon = 1e-12);
        assert_relative_eq!(truncated_mean_abs(sy, 0.043), 0.0149, epsilon = 1e-12);
        assert!((sx - 0.02778).abs() < 1e-4, "{sx}");
        assert!((sy - 0.02011).abs() < 1e-4, "{sy}");
        let bad = AxisNoise {
            mean_abs_m: 0.03,
            max_abs_m: 0.04,
        };
        assert!(bad.sigma().is_err());
    }

    #[test]
    fn noiseless_observation_is_truth() {
        let mut cfg = EmulatorConfig::default();
        cfg.noise.enabled = false;
        let mut vision = VisionSystem::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = VehicleState::at(2.0, 3.0, 0.5, 0.2);
        let f = vision
            .capture(
                &[(VehicleId(1), s)],
                &SandTable::default(),
                &LatencyModel::default(),
                &mut rng,
            )
            .unwrap();
        let o = f.observations[0];
        assert_eq!((o.x_m, o.y_m, o.heading_rad), (2.0, 3.0, 0.5));
        let d = (o.emit_time - o.capture_time).as_millis_f64();
        assert!((39.0..=69.0).contains(&d));
        assert!(!o.out_of_bounds);
    }

    #[test]
    fn out_of_bounds_is_flagged() {
        let cfg = EmulatorConfig::default();
        let mut vision = VisionSystem::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = VehicleState::at(9.5, 3.0, 0.0, 0.0);
        let f = vision
            .capture(
                &[(VehicleId(1), s)],
                &SandTable::default(),
                &LatencyModel::default(),
                &mut rng,
            )
            .unwrap();
        assert!(f.observations[0].out_of_bounds);
    }

    #[test]
    fn output_frame_pattern() {
        let vision = VisionSystem::new(&EmulatorConfig::default()).unwrap();
        let emitted = (0..30).filter(|&k| vision.is_output_frame(k)).count();
        assert_eq!(emitted, 8);
        let emitted = (0..1800).filter(|&k| vision.is_output_frame(k)).count();
        assert_eq!(emitted, 480);
    }

    fn obs(id: u32, t_ms: f64) -> PoseObservation {
        PoseObservation {
            vehicle_id: VehicleId(id),
            x_m: 4.5,
            y_m: 0.5,
            heading_rad: std::f64::consts::FRAC_PI_2,
            capture_time: SimTime::from_millis_f64(t_ms),
            emit_time: SimTime::from_millis_f64(t_ms + 50.0),
            out_of_bounds: false,
        }
    }

    #[test]
    fn workstation_direct_mode_is_sandboxed() {
        let cfg = EmulatorConfig::default();
        let mut ws = Workstation::new(&cfg);
        ws.register(
            VehicleId(1),
            VehicleParams::default(),
            WaypointConfig::default(),
        );
        ws.on_mode(
            VehicleId(1),
            ResolvedMode::Direct {
                speed_mps: 2.0,
                steer_rad: 0.0,
            },
        )
        .unwrap();
        let out = ws.tick(SimTime::ZERO);
        assert_eq!(out[0].speed_mps, 1.0);
        assert!(out[0].clamp.speed);
    }

    #[test]
    fn workstation_holds_without_fix_and_when_stale() {
        let cfg = EmulatorConfig::default();
        let mut ws = Workstation::new(&cfg);
        let id = VehicleId(1);
        ws.register(id, VehicleParams::default(), WaypointConfig::default());
        let ring = SandTable::default().track.resample(0.1);
        ws.on_mode(
            id,
            ResolvedMode::Follow {
                waypoints: ring,
                looped: true,
                cruise_speed_mps: Some(0.2),
                node_id: None,
            },
        )
        .unwrap();
        // No observation: zero command held.
        let out = ws.tick(SimTime::ZERO);
        assert_eq!((out[0].speed_mps, out[0].steer_rad), (0.0, 0.0));
        ws.on_observation(obs(1, 100.0)).unwrap();
        let out = ws.tick(SimTime::from_millis_f64(250.0));
        assert!(out[0].speed_mps > 0.0);
        let held = out[0];
        let out = ws.tick(SimTime::from_millis_f64(700.0));
        assert_eq!(out[0], held);
        assert_eq!(ws.stale_holds(id), 1);
        assert_eq!(ws.commands_sent(id), 3);
    }
}
