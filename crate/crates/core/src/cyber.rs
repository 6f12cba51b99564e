//! Cyber space: mapping vehicles that mirror observed miniatures, cloud
//! vehicles simulated with the ideal bicycle model, and the composed
//! platoon view.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimTime;
use crate::control::{ControlError, WaypointConfig};
use crate::emulator::PoseObservation;
use crate::modes::{ModeKind, ResolvedMode, VehicleCommand, VehicleController};
use crate::scalar::wrap_angle;
use crate::vehicle::{sandbox_clamp, step_bicycle, ModelError};
use crate::world::{RecordKind, VehicleId, VehicleRecord};
use crate::{ControlInput, Path, Point, VehicleParams, VehicleState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CyberError {
    #[error("observation for vehicle {got} sent to mapping vehicle {expected}")]
    WrongVehicle { expected: VehicleId, got: VehicleId },
    #[error("unknown vehicle {0}")]
    UnknownVehicle(VehicleId),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    /// Span of fixes used for the finite-difference speed.
    pub speed_window_s: f64,
    /// Fraction of the position residual applied per fix (1 snaps).
    pub correction_gain: f64,
    /// Largest position correction applied per fix.
    pub max_correction_m: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            speed_window_s: 0.25,
            correction_gain: 0.35,
            max_correction_m: 0.05,
        }
    }
}

/// Result of feeding one observation to a mapping vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncOutcome {
    Applied,
    /// Older than the last applied fix.
    OutOfOrder,
    /// Same capture as the last applied fix.
    Duplicate,
}

/// Virtual mirror of a physical vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingVehicle {
    pub id: VehicleId,
    pub last_observation: Option<PoseObservation>,
    /// Dead-reckoned estimate valid at `state_time`.
    pub state: VehicleState,
    pub state_time: SimTime,
    pub staleness_s: f64,
    pub dropped: u64,
    pub params: VehicleParams,
    pub cfg: MappingConfig,
    history: VecDeque<(SimTime, Point)>,
}

impl MappingVehicle {
    pub fn new(id: VehicleId, params: VehicleParams, cfg: MappingConfig) -> Self {
        Self {
            id,
            last_observation: None,
            state: VehicleState::default(),
            state_time: SimTime::ZERO,
            staleness_s: f64::INFINITY,
            dropped: 0,
            params,
            cfg,
            history: VecDeque::new(),
        }
    }

    /// Constant speed and heading extrapolation up to `now`.
    pub fn advance(&mut self, now: SimTime) {
        if now <= self.state_time {
            return;
        }
        let dt = (now - self.state_time).as_secs_f64();
        let (dx, dy) = self.state.direction();
        self.state.x_m += self.state.speed_mps * dx * dt;
        self.state.y_m += self.state.speed_mps * dy * dt;
        self.state_time = now;
        if let Some(obs) = self.last_observation {
            self.staleness_s = (now - obs.capture_time).as_secs_f64();
        }
    }

    /// Folds a fix into the estimate: speed from a finite difference over
    /// the smoothing window, position pulled toward the fix (extrapolated
    /// to `now`) by a bounded correction.
    pub fn sync_mapping(
        &mut self,
        obs: &PoseObservation,
        now: SimTime,
    ) -> Result<SyncOutcome, CyberError> {
        if obs.vehicle_id != self.id {
            return Err(CyberError::WrongVehicle {
                expected: self.id,
                got: obs.vehicle_id,
            });
        }
        if let Some(last) = self.last_observation {
            if obs.capture_time < last.capture_time {
                self.dropped += 1;
                return Ok(SyncOutcome::OutOfOrder);
            }
            if obs.capture_time == last.capture_time {
                return Ok(SyncOutcome::Duplicate);
            }
        }
        let fix = Point::new(obs.x_m, obs.y_m);
        self.history.push_back((obs.capture_time, fix));
        let window = SimTime::from_secs_f64(self.cfg.speed_window_s);
        while self.history.len() > 2 && obs.capture_time - self.history[1].0 >= window {
            self.history.pop_front();
        }
        let now = now.max(obs.capture_time);
        let first = self.last_observation.is_none();
        if first {
            self.state = VehicleState::at(obs.x_m, obs.y_m, obs.heading_rad, 0.0);
            self.state_time = now;
        } else {
            self.advance(now);
            let (t0, p0) = self.history[0];
            let dt = (obs.capture_time - t0).as_secs_f64();
            let speed = if dt > 0.0 { fix.dist(&p0) / dt } else { 0.0 };
            self.state.speed_mps = self.params.speed_limit_mps.clamp(speed);
            let lead = (now - obs.capture_time).as_secs_f64() * self.state.speed_mps;
            let (hx, hy) = (obs.heading_rad.sin(), obs.heading_rad.cos());
            let target = Point::new(obs.x_m + hx * lead, obs.y_m + hy * lead);
            let (mut cx, mut cy) = (
                self.cfg.correction_gain * (target.x - self.state.x_m),
                self.cfg.correction_gain * (target.y - self.state.y_m),
            );
            let norm = cx.hypot(cy);
            if norm > self.cfg.max_correction_m {
                let k = self.cfg.max_correction_m / norm;
                cx *= k;
                cy *= k;
            }
            self.state.x_m += cx;
            self.state.y_m += cy;
            let dh = wrap_angle(obs.heading_rad - self.state.heading_rad);
            self.state.heading_rad =
                wrap_angle(self.state.heading_rad + self.cfg.correction_gain * dh);
        }
        self.last_observation = Some(*obs);
        self.staleness_s = (now - obs.capture_time).as_secs_f64();
        Ok(SyncOutcome::Applied)
    }

    pub fn record(&self) -> Option<VehicleRecord> {
        self.last_observation.map(|_| VehicleRecord {
            id: self.id,
            kind: RecordKind::Mapping,
            x_m: self.state.x_m,
            y_m: self.state.y_m,
            heading_rad: self.state.heading_rad,
            speed_mps: self.state.speed_mps,
            stamp: self.state_time,
        })
    }
}

/// Simulated vehicle with no physical counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudVehicle {
    pub id: VehicleId,
    pub state: VehicleState,
    pub params: VehicleParams,
}

/// Sandboxed ideal step: no actuator lag.
pub fn step_cloud(
    vehicle: &CloudVehicle,
    input: &ControlInput,
    dt: f64,
) -> Result<CloudVehicle, ModelError> {
    let c = sandbox_clamp(input, vehicle.state.speed_mps, &vehicle.params);
    Ok(CloudVehicle {
        state: step_bicycle(&vehicle.state, &c.input, dt, &vehicle.params)?,
        ..*vehicle
    })
}

/// Tracks a speed/steer command as fast as the acceleration envelope allows.
pub fn drive_cloud(
    vehicle: &CloudVehicle,
    speed_mps: f64,
    steer_rad: f64,
    dt: f64,
) -> Result<CloudVehicle, ModelError> {
    let target = vehicle.params.speed_limit_mps.clamp(speed_mps);
    let accel = if target.is_finite() {
        (target - vehicle.state.speed_mps) / dt
    } else {
        f64::NAN
    };
    step_cloud(vehicle, &ControlInput::new(accel, steer_rad), dt)
}

/// Input to [`compose_world`]: one vehicle's position on the shared track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPosition {
    pub id: VehicleId,
    pub kind: RecordKind,
    pub x_m: f64,
    pub y_m: f64,
    pub speed_mps: f64,
}

impl From<&VehicleRecord> for TrackPosition {
    fn from(r: &VehicleRecord) -> Self {
        Self {
            id: r.id,
            kind: r.kind,
            x_m: r.x_m,
            y_m: r.y_m,
            speed_mps: r.speed_mps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlatoonMember {
    pub id: VehicleId,
    pub kind: RecordKind,
    pub arc_m: f64,
    pub speed_mps: f64,
    pub predecessor: Option<VehicleId>,
    /// Centre-to-centre arc distance to the predecessor.
    pub spacing_m: Option<f64>,
}

/// Vehicles ordered head first along the track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonView {
    pub members: Vec<PlatoonMember>,
    /// Pair closer than one body length, follower second.
    pub collision: Option<(VehicleId, VehicleId)>,
}

impl PlatoonView {
    pub fn member(&self, id: VehicleId) -> Option<&PlatoonMember> {
        self.members.iter().find(|m| m.id == id)
    }

    pub fn head(&self) -> Option<&PlatoonMember> {
        self.members.first()
    }
}

/// Orders vehicles along a closed track. The head is the vehicle with the
/// largest free arc ahead of it; every other vehicle follows the nearest
/// vehicle ahead. Spacing wraps modulo the track length.
pub fn compose_world(vehicles: &[TrackPosition], track: &Path, body_length_m: f64) -> PlatoonView {
    let mut placed: Vec<(f64, &TrackPosition)> = vehicles
        .iter()
        .map(|v| (track.project(Point::new(v.x_m, v.y_m)).arc_m, v))
        .collect();
    // Descending arc: each entry's predecessor is the previous one.
    placed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    let n = placed.len();
    if n == 0 {
        return PlatoonView {
            members: vec![],
            collision: None,
        };
    }
    if n == 1 {
        let (arc, v) = placed[0];
        return PlatoonView {
            members: vec![PlatoonMember {
                id: v.id,
                kind: v.kind,
                arc_m: arc,
                speed_mps: v.speed_mps,
                predecessor: None,
                spacing_m: None,
            }],
            collision: None,
        };
    }
    let gap_ahead = |i: usize| {
        let ahead = placed[(i + n - 1) % n].0;
        track.arc_gap(ahead, placed[i].0)
    };
    let head = (0..n)
        .max_by(|&a, &b| gap_ahead(a).total_cmp(&gap_ahead(b)).then(b.cmp(&a)))
        .unwrap();
    let mut members = Vec::with_capacity(n);
    let mut collision = None;
    for k in 0..n {
        let i = (head + k) % n;
        let (arc, v) = placed[i];
        let (predecessor, spacing_m) = if k == 0 {
            (None, None)
        } else {
            let p = (i + n - 1) % n;
            (Some(placed[p].1.id), Some(gap_ahead(i)))
        };
        if let (Some(p), Some(s)) = (predecessor, spacing_m) {
            if s < body_length_m && collision.is_none() {
                collision = Some((p, v.id));
            }
        }
        members.push(PlatoonMember {
            id: v.id,
            kind: v.kind,
            arc_m: arc,
            speed_mps: v.speed_mps,
            predecessor,
            spacing_m,
        });
    }
    PlatoonView { members, collision }
}

struct CloudEntry {
    vehicle: CloudVehicle,
    controller: VehicleController,
}

/// Single-writer store of all virtual vehicles.
pub struct CyberSpace {
    pub mapping_cfg: MappingConfig,
    mappings: BTreeMap<VehicleId, MappingVehicle>,
    clouds: BTreeMap<VehicleId, CloudEntry>,
    control_errors: u64,
}

impl CyberSpace {
    pub fn new(mapping_cfg: MappingConfig) -> Self {
        Self {
            mapping_cfg,
            mappings: BTreeMap::new(),
            clouds: BTreeMap::new(),
            control_errors: 0,
        }
    }

    pub fn add_mapping(&mut self, id: VehicleId, params: VehicleParams) {
        self.mappings
            .insert(id, MappingVehicle::new(id, params, self.mapping_cfg));
    }

    pub fn add_cloud(
        &mut self,
        id: VehicleId,
        state: VehicleState,
        params: VehicleParams,
        cfg: WaypointConfig<f64>,
    ) {
        self.clouds.insert(
            id,
            CloudEntry {
                vehicle: CloudVehicle { id, state, params },
                controller: VehicleController::new(cfg),
            },
        );
    }

    pub fn mapping(&self, id: VehicleId) -> Option<&MappingVehicle> {
        self.mappings.get(&id)
    }

    pub fn cloud(&self, id: VehicleId) -> Option<&CloudVehicle> {
        self.clouds.get(&id).map(|c| &c.vehicle)
    }

    pub fn cloud_mode(&self, id: VehicleId) -> Option<ModeKind> {
        self.clouds.get(&id).map(|c| c.controller.mode_kind())
    }

    pub fn control_errors(&self) -> u64 {
        self.control_errors
    }

    pub fn on_observation(
        &mut self,
        obs: &PoseObservation,
        now: SimTime,
    ) -> Result<SyncOutcome, CyberError> {
        self.mappings
            .get_mut(&obs.vehicle_id)
            .ok_or(CyberError::UnknownVehicle(obs.vehicle_id))?
            .sync_mapping(obs, now)
    }

    pub fn on_mode(&mut self, id: VehicleId, mode: ResolvedMode) -> Result<(), CyberError> {
        self.clouds
            .get_mut(&id)
            .ok_or(CyberError::UnknownVehicle(id))?
            .controller
            .schedule(mode)?;
        Ok(())
    }

    pub fn on_command(&mut self, cmd: &VehicleCommand) -> Result<bool, CyberError> {
        Ok(self
            .clouds
            .get_mut(&cmd.vehicle_id)
            .ok_or(CyberError::UnknownVehicle(cmd.vehicle_id))?
            .controller
            .command(cmd))
    }

    /// One simulation tick: mapping vehicles dead-reckon to `now`, cloud
    /// vehicles evaluate their mode and step by `dt`.
    pub fn tick(&mut self, now: SimTime, dt: f64) -> Result<(), CyberError> {
        for m in self.mappings.values_mut() {
            m.advance(now);
        }
        for c in self.clouds.values_mut() {
            c.controller.apply_pending();
            let out = match c
                .controller
                .evaluate(Some(&c.vehicle.state), &c.vehicle.params)
            {
                Ok(out) => out,
                Err(_) => {
                    self.control_errors += 1;
                    None
                }
            };
            let (speed, steer) = out.map_or((0.0, c.vehicle.state.steer_rad), |o| {
                (o.speed_mps, o.steer_rad)
            });
            c.vehicle = drive_cloud(&c.vehicle, speed, steer, dt)?;
        }
        Ok(())
    }

    /// Current record of every vehicle with a known state.
    pub fn records(&self, now: SimTime) -> Vec<VehicleRecord> {
        let mut out: Vec<VehicleRecord> =
            self.mappings.values().filter_map(|m| m.record()).collect();
        out.extend(self.clouds.values().map(|c| VehicleRecord {
            id: c.vehicle.id,
            kind: RecordKind::Cloud,
            x_m: c.vehicle.state.x_m,
            y_m: c.vehicle.state.y_m,
            heading_rad: c.vehicle.state.heading_rad,
            speed_mps: c.vehicle.state.speed_mps,
            stamp: now,
        }));
        out.sort_by_key(|r| r.id);
        out
    }

    pub fn compose(&self, now: SimTime, track: &Path, body_length_m: f64) -> PlatoonView {
        let pos: Vec<TrackPosition> = self.records(now).iter().map(TrackPosition::from).collect();
        compose_world(&pos, track, body_length_m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn obs(t_ms: f64, x: f64, y: f64) -> PoseObservation {
        PoseObservation {
            vehicle_id: VehicleId(1),
            x_m: x,
            y_m: y,
            heading_rad: 0.0,
            capture_time: SimTime::from_millis_f64(t_ms),
            emit_time: SimTime::from_millis_f64(t_ms + 50.0),
            out_of_bounds: false,
        }
    }

    fn mapping() -> MappingVehicle {
        MappingVehicle::new(
            VehicleId(1),
            VehicleParams::default(),
            MappingConfig::default(),
        )
    }

    #[test]
    fn finite_difference_speed() {
        let mut m = mapping();
        m.sync_mapping(&obs(0.0, 1.0, 1.0), SimTime::from_millis_f64(0.0))
            .unwrap();
        m.sync_mapping(&obs(125.0, 1.0, 1.025), SimTime::from_millis_f64(125.0))
            .unwrap();
        assert_relative_eq!(m.state.speed_mps, 0.2, epsilon = 1e-9);
    }

    #[test]
    fn window_spans_two_fixes_at_eight_hz() {
        let mut m = mapping();
        for k in 0..6 {
            let t = 125.0 * k as f64;
            // 0.2 m/s along +y with alternating ±10 mm noise.
            let noise = if k % 2 == 0 { 0.01 } else { -0.01 };
            m.sync_mapping(
                &obs(t, 1.0, 1.0 + 0.2 * t / 1000.0 + noise),
                SimTime::from_millis_f64(t),
            )
            .unwrap();
        }
        // Window of 0.25 s: fixes 3 and 5 have equal noise, so the estimate
        // is exact.
        assert_relative_eq!(m.state.speed_mps, 0.2, epsilon = 1e-9);
    }

    #[test]
    fn identical_observation_changes_nothing() {
        let mut m = mapping();
        let o = obs(0.0, 2.0, 3.0);
        m.sync_mapping(&o, SimTime::ZERO).unwrap();
        let before = m.state;
        let o2 = PoseObservation {
            capture_time: SimTime(1),
            ..o
        };
        m.sync_mapping(&o2, SimTime(1)).unwrap();
        assert_eq!(m.state.x_m, before.x_m);
        assert_eq!(m.state.y_m, before.y_m);
        assert_eq!(m.state.heading_rad, before.heading_rad);
    }

    #[test]
    fn out_of_order_dropped() {
        let mut m = mapping();
        m.sync_mapping(&obs(125.0, 1.0, 1.0), SimTime::from_millis_f64(125.0))
            .unwrap();
        let before = m.clone();
        let r = m
            .sync_mapping(&obs(0.0, 5.0, 1.0), SimTime::from_millis_f64(130.0))
            .unwrap();
        assert_eq!(r, SyncOutcome::OutOfOrder);
        assert_eq!(m.state, before.state);
        assert_eq!(m.dropped, 1);
    }

    #[test]
    fn correction_is_bounded() {
        let mut m = mapping();
        m.sync_mapping(&obs(0.0, 1.0, 1.0), SimTime::ZERO).unwrap();
        let before = m.state;
        m.sync_mapping(&obs(125.0, 1.0, 3.0), SimTime::from_millis_f64(125.0))
            .unwrap();
        let moved = Point::new(m.state.x_m, m.state.y_m).dist(&Point::new(before.x_m, before.y_m));
        assert!(moved <= 0.05 + 1e-12, "{moved}");
    }

    #[test]
    fn cloud_ramp_is_accel_limited() {
        let mut c = CloudVehicle {
            id: VehicleId(2),
            state: VehicleState::at(1.0, 1.0, 0.0, 0.0),
            params: VehicleParams::default(),
        };
        let mut t = 0.0;
        while c.state.speed_mps < 0.3 {
            c = drive_cloud(&c, 0.3, 0.0, 0.01).unwrap();
            t += 0.01;
        }
        // 0.3 / 4.5 = 0.0667 s, reached on the seventh 10 ms step.
        assert!((t - 0.07f64).abs() < 1e-9, "{t}");
        assert_eq!(c.state.speed_mps, 0.3);
    }

    #[test]
    fn cloud_zero_input_only_advances() {
        let c = CloudVehicle {
            id: VehicleId(2),
            state: VehicleState::at(1.0, 1.0, 0.3, 0.2),
            params: VehicleParams::default(),
        };
        let n = step_cloud(&c, &ControlInput::new(0.0, 0.0), 0.01).unwrap();
        assert_eq!((n.state.heading_rad, n.state.speed_mps), (0.3, 0.2));
        assert_relative_eq!(n.state.x_m, 1.0 + 0.002 * 0.3f64.sin(), epsilon = 1e-15);
    }

    fn pos(id: u32, kind: RecordKind, x: f64, y: f64) -> TrackPosition {
        TrackPosition {
            id: VehicleId(id),
            kind,
            x_m: x,
            y_m: y,
            speed_mps: 0.0,
        }
    }

    #[test]
    fn compose_mixed_formation() {
        let line = Path::new(
            vec![
                Point::new(0.0, 0.0),
                Point::new(10.0, 0.0),
                Point::new(10.0, 10.0),
                Point::new(0.0, 10.0),
            ],
            true,
        )
        .unwrap();
        use RecordKind::{Cloud as V, Mapping as P};
        let vs = [
            pos(1, P, 4.0, 0.0),
            pos(2, P, 3.5, 0.0),
            pos(3, V, 3.0, 0.0),
            pos(4, V, 2.5, 0.0),
            pos(5, P, 2.0, 0.0),
        ];
        let view = compose_world(&vs, &line, 0.2);
        let ids: Vec<u32> = view.members.iter().map(|m| m.id.0).collect();
        assert_eq!(ids, vec![1, 2, 3, 4, 5]);
        let rel: Vec<(RecordKind, RecordKind)> = view.members[1..]
            .iter()
            .map(|m| (m.kind, view.member(m.predecessor.unwrap()).unwrap().kind))
            .collect();
        for pair in [(P, P), (V, P), (V, V), (P, V)] {
            assert!(rel.contains(&pair), "{pair:?}");
        }
        for m in &view.members[1..] {
            assert_relative_eq!(m.spacing_m.unwrap(), 0.5, epsilon = 1e-12);
        }
        assert!(view.collision.is_none());
    }

    #[test]
    fn single_vehicle_has_no_predecessor() {
        let ring = crate::SandTable::default().track;
        let view = compose_world(&[pos(1, RecordKind::Cloud, 4.5, 0.5)], &ring, 0.2);
        assert_eq!(view.members[0].predecessor, None);
        assert!(compose_world(&[], &ring, 0.2).members.is_empty());
    }

    #[test]
    fn spacing_wraps_on_three_point_track() {
        // 3-4-5 triangle, length 12: leader just past s=0, follower just
        // before s=12.
        let tri = Path::new(
            vec![
                Point::new(0.0, 0.0),
                Point::new(3.0, 0.0),
                Point::new(3.0, 4.0),
            ],
            true,
        )
        .unwrap();
        let leader = pos(1, RecordKind::Cloud, 0.2, 0.0);
        // 0.3 m before the closing vertex on the hypotenuse.
        let follower = pos(2, RecordKind::Cloud, 0.3 * 0.6, 0.3 * 0.8);
        let view = compose_world(&[follower, leader], &tri, 0.2);
        assert_eq!(view.head().unwrap().id, VehicleId(1));
        assert_relative_eq!(view.members[1].spacing_m.unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn collision_flag() {
        let ring = crate::SandTable::default().track;
        let view = compose_world(
            &[
                pos(1, RecordKind::Cloud, 4.6, 0.5),
                pos(2, RecordKind::Mapping, 4.5, 0.5),
            ],
            &ring,
            0.2,
        );
        assert_eq!(view.collision, Some((VehicleId(1), VehicleId(2))));
    }
}
