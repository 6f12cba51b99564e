//! Platoon experiment harness. Wires the physical emulator, the cloud hub
//! and the cyber space together on one virtual clock and records what
//! happens.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{tick_time, SimTime};
use crate::config::TwinConfig;
use crate::control::{next_speed, platoon_accel};
use crate::cyber::{compose_world, CyberError, CyberSpace, PlatoonView, TrackPosition};
use crate::emulator::{
    DispatchedCommand, EmulatorError, PhysicalSpace, PoseObservation, Workstation,
};
use crate::hub::{
    CloudHub, DeadLetter, DelayRecord, EndpointId, Envelope, HubError, ModeDispatch, NodeMap,
    NodeMapConfig, Payload, Router,
};
use crate::latency::Stage;
use crate::modes::{CommandSource, ControlMode, ModeAssignment, ResolvedMode, VehicleCommand};
use crate::world::{RecordKind, VehicleId, VehicleKind, WorldSnapshot};
use crate::{PlatoonGains, SandTable, VehicleParams, VehicleState};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Emulator(#[from] EmulatorError),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error(transparent)]
    Cyber(#[from] CyberError),
}

/// Periodic leader speed waveform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum LeaderProfile {
    /// Starts at the midpoint, rising.
    Sinusoid {
        min_mps: f64,
        max_mps: f64,
        period_s: f64,
    },
    /// High for the first half period, low for the second.
    Square {
        min_mps: f64,
        max_mps: f64,
        period_s: f64,
    },
    /// Square wave with linear ramps of `ramp_s` between the levels.
    Trapezoid {
        min_mps: f64,
        max_mps: f64,
        period_s: f64,
        ramp_s: f64,
    },
    Constant {
        speed_mps: f64,
    },
}

impl Default for LeaderProfile {
    fn default() -> Self {
        LeaderProfile::Sinusoid {
            min_mps: 0.10,
            max_mps: 0.26,
            period_s: 30.0,
        }
    }
}

impl LeaderProfile {
    pub fn period_s(&self) -> Option<f64> {
        match *self {
            LeaderProfile::Sinusoid { period_s, .. }
            | LeaderProfile::Square { period_s, .. }
            | LeaderProfile::Trapezoid { period_s, .. } => Some(period_s),
            LeaderProfile::Constant { .. } => None,
        }
    }

    /// Unsaturated waveform value at `t` seconds.
    pub fn raw(&self, t: f64) -> f64 {
        match *self {
            LeaderProfile::Sinusoid {
                min_mps,
                max_mps,
                period_s,
            } => {
                let mid = 0.5 * (min_mps + max_mps);
                let amp = 0.5 * (max_mps - min_mps);
                mid + amp * (std::f64::consts::TAU * t / period_s).sin()
            }
            LeaderProfile::Square {
                min_mps,
                max_mps,
                period_s,
            } => {
                if t.rem_euclid(period_s) < period_s / 2.0 {
                    max_mps
                } else {
                    min_mps
                }
            }
            LeaderProfile::Trapezoid {
                min_mps,
                max_mps,
                period_s,
                ramp_s,
            } => {
                let half = period_s / 2.0;
                let ph = t.rem_euclid(period_s);
                let r = ramp_s.min(half);
                let (from, to, local) = if ph < half {
                    (min_mps, max_mps, ph)
                } else {
                    (max_mps, min_mps, ph - half)
                };
                if r > 0.0 && local < r {
                    from + (to - from) * local / r
                } else {
                    to
                }
            }
            LeaderProfile::Constant { speed_mps } => speed_mps,
        }
    }

    fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            LeaderProfile::Sinusoid {
                min_mps,
                max_mps,
                period_s,
            }
            | LeaderProfile::Square {
                min_mps,
                max_mps,
                period_s,
            } => min_mps >= 0.0 && max_mps >= min_mps && period_s > 0.0,
            LeaderProfile::Trapezoid {
                min_mps,
                max_mps,
                period_s,
                ramp_s,
            } => min_mps >= 0.0 && max_mps >= min_mps && period_s > 0.0 && ramp_s >= 0.0,
            LeaderProfile::Constant { speed_mps } => speed_mps >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid leader profile {self:?}"))
        }
    }
}

/// Leader speed at `t`, saturated to `[0, cap]`.
pub fn leader_speed(t: f64, profile: &LeaderProfile, cap_mps: f64) -> f64 {
    profile.raw(t.max(0.0)).clamp(0.0, cap_mps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Head first. Vehicle ids are assigned 1, 2, … in this order.
    pub formation: Vec<VehicleKind>,
    pub leader_profile: LeaderProfile,
    pub v_max_physical: f64,
    pub v_max_virtual: f64,
    pub duration_s: f64,
    pub seed: u64,
    pub warmup_s: f64,
    pub log_hz: u64,
    pub snapshot_hz: u64,
    pub initial_spacing_m: f64,
    /// Arc position of the head vehicle at t = 0.
    pub start_arc_m: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        use VehicleKind::{Physical as P, Virtual as V};
        Self {
            formation: vec![P, P, V, V, P],
            leader_profile: LeaderProfile::default(),
            v_max_physical: 0.26,
            v_max_virtual: 0.3,
            duration_s: 300.0,
            seed: 7,
            warmup_s: 30.0,
            log_hz: 8,
            snapshot_hz: 10,
            initial_spacing_m: 0.5,
            start_arc_m: 3.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, params: &VehicleParams) -> Result<(), String> {
        for (name, v) in [
            ("v_max_physical", self.v_max_physical),
            ("v_max_virtual", self.v_max_virtual),
        ] {
            if !(v > 0.0) || !params.speed_limit_mps.contains(v) {
                return Err(format!("{name} = {v} outside the speed envelope"));
            }
        }
        if !(self.duration_s >= 0.0 && self.warmup_s >= 0.0) {
            return Err("durations must be non-negative".into());
        }
        if self.log_hz == 0 || self.snapshot_hz == 0 {
            return Err("log and snapshot rates must be positive".into());
        }
        if !(self.initial_spacing_m > params.body_length_m) {
            return Err("initial spacing must exceed the body length".into());
        }
        self.leader_profile.validate()
    }

    pub fn cap(&self, kind: VehicleKind) -> f64 {
        match kind {
            VehicleKind::Physical => self.v_max_physical,
            VehicleKind::Virtual => self.v_max_virtual,
        }
    }
}

/// One vehicle at one log tick, from ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlatoonRow {
    pub time_s: f64,
    pub vehicle_id: VehicleId,
    pub kind: VehicleKind,
    pub arc_pos_m: f64,
    pub speed_mps: f64,
    pub predecessor: Option<VehicleId>,
    /// Centre-to-centre arc spacing to the predecessor.
    pub spacing_to_pred_m: Option<f64>,
    /// Bumper-to-bumper gap: spacing minus one body length.
    pub gap_m: Option<f64>,
}

/// One platoon-law evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerRow {
    pub time_s: f64,
    pub vehicle_id: VehicleId,
    pub predecessor: Option<VehicleId>,
    pub spacing_m: Option<f64>,
    pub spacing_error_m: Option<f64>,
    pub accel_mps2: f64,
    pub speed_cmd_mps: f64,
}

/// Emitted observation next to the ground truth it was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub capture_s: f64,
    pub emit_s: f64,
    pub vehicle_id: VehicleId,
    pub x_m: f64,
    pub y_m: f64,
    pub heading_rad: f64,
    pub true_x_m: f64,
    pub true_y_m: f64,
    pub true_heading_rad: f64,
    pub true_speed_mps: f64,
    pub out_of_bounds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub time_s: f64,
    pub predecessor: VehicleId,
    pub follower: VehicleId,
    pub spacing_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub commands_sent: BTreeMap<VehicleId, u64>,
    pub stale_holds: BTreeMap<VehicleId, u64>,
    pub captures: u64,
    pub vision_outputs: u64,
    pub dropped_observations: u64,
    pub dead_letters: u64,
    pub rejected_commands: u64,
    pub control_errors: u64,
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config: TwinConfig,
    pub kinds: BTreeMap<VehicleId, VehicleKind>,
    pub platoon_log: Vec<PlatoonRow>,
    pub controller_log: Vec<ControllerRow>,
    pub observations: Vec<ObservationRow>,
    pub delays: Vec<DelayRecord>,
    pub dead_letters: Vec<DeadLetter>,
    pub snapshots: Vec<WorldSnapshot>,
    pub counters: Counters,
    pub abort: Option<Abort>,
    pub end_time: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
enum Event {
    Plant(u64),
    Cyber(u64),
    Capture(u64),
    VisionArrive(Vec<PoseObservation>),
    HubRelay(PoseObservation),
    Deliver(Envelope),
    VehicleArrive(DispatchedCommand),
    HubTick(u64),
    Controller(u64),
    Workstation(u64),
    Snapshot(u64),
    Log(u64),
}

impl Event {
    /// Order of events sharing a timestamp: state advances first, then
    /// sensing and message arrivals, then the control loops, logging last.
    fn rank(&self) -> u8 {
        match self {
            Event::Plant(_) => 0,
            Event::Cyber(_) => 1,
            Event::Capture(_) => 2,
            Event::VisionArrive(_)
            | Event::HubRelay(_)
            | Event::Deliver(_)
            | Event::VehicleArrive(_) => 3,
            Event::HubTick(_) => 4,
            Event::Controller(_) => 5,
            Event::Workstation(_) => 6,
            Event::Snapshot(_) => 7,
            Event::Log(_) => 8,
        }
    }
}

struct Queued {
    time: SimTime,
    rank: u8,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.rank, other.seq).cmp(&(self.time, self.rank, self.seq))
    }
}

/// Longitudinal platoon service running in the cloud. Speeds in the law
/// are the commanded speeds it shares with every member; spacing comes
/// from the hub's world view.
struct PlatoonService {
    order: Vec<VehicleId>,
    kinds: BTreeMap<VehicleId, VehicleKind>,
    commanded: BTreeMap<VehicleId, f64>,
    gains: PlatoonGains,
    profile: LeaderProfile,
    caps: (f64, f64),
}

impl PlatoonService {
    fn cap(&self, id: VehicleId) -> f64 {
        match self.kinds[&id] {
            VehicleKind::Physical => self.caps.0,
            VehicleKind::Virtual => self.caps.1,
        }
    }

    fn tick(&mut self, t: f64, view: &PlatoonView, params: &VehicleParams) -> Vec<ControllerRow> {
        let Some(&leader) = self.order.first() else {
            return vec![];
        };
        let complete = self.order.iter().all(|id| view.member(*id).is_some());
        let prev = self.commanded.clone();
        let leader_v = prev[&leader];
        let mut rows = Vec::with_capacity(self.order.len());
        for &id in &self.order {
            let member = view.member(id);
            let pred = member.and_then(|m| m.predecessor.zip(m.spacing_m));
            let self_v = prev[&id];
            let (accel, cmd, spacing) = match pred {
                Some((p, spacing)) if id != leader && complete => {
                    let a = platoon_accel(self_v, prev[&p], leader_v, spacing, &self.gains, params);
                    let v = next_speed(self_v, a, &self.gains, params).min(self.cap(id));
                    (a, v, Some((p, spacing)))
                }
                // Leader, or no usable predecessor: follow the profile.
                _ if id == leader || complete => {
                    let v = leader_speed(t, &self.profile, self.cap(id));
                    ((v - self_v) / self.gains.dt_s, v, None)
                }
                _ => continue,
            };
            self.commanded.insert(id, cmd);
            rows.push(ControllerRow {
                time_s: t,
                vehicle_id: id,
                predecessor: spacing.map(|s| s.0),
                spacing_m: spacing.map(|s| s.1),
                spacing_error_m: spacing.map(|s| s.1 - self.gains.s_des_m),
                accel_mps2: accel,
                speed_cmd_mps: cmd,
            });
        }
        rows
    }
}

/// The full testbed on a virtual clock.
pub struct Simulation {
    cfg: TwinConfig,
    table: SandTable,
    physical: PhysicalSpace,
    workstation: Workstation,
    hub: CloudHub,
    cyber: CyberSpace,
    platoon: PlatoonService,
    queue: BinaryHeap<Queued>,
    next_seq: u64,
    now: SimTime,
    plant_dt: SimTime,
    control_dt: SimTime,
    kinds: BTreeMap<VehicleId, VehicleKind>,
    platoon_enabled: bool,
    record: bool,
    platoon_log: Vec<PlatoonRow>,
    controller_log: Vec<ControllerRow>,
    observations: Vec<ObservationRow>,
    local_delays: Vec<DelayRecord>,
    snapshots: Vec<WorldSnapshot>,
    external_outbox: Vec<(u32, Envelope)>,
    counters: Counters,
    abort: Option<Abort>,
}

impl Simulation {
    pub fn new(cfg: &TwinConfig) -> Result<Self, ScenarioError> {
        cfg.validate()
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
        let sc = &cfg.scenario;
        let table = SandTable::from_geometry(&cfg.table)
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
        let mut emu_rng = ChaCha8Rng::seed_from_u64(sc.seed);
        emu_rng.set_stream(0);
        let mut hub_rng = ChaCha8Rng::seed_from_u64(sc.seed);
        hub_rng.set_stream(1);
        let physical = PhysicalSpace::new(cfg.emulator, table.clone(), emu_rng)?;
        let workstation = Workstation::new(&cfg.emulator);
        let nodes_cfg = cfg
            .nodes
            .clone()
            .unwrap_or_else(|| NodeMapConfig::default_for(&table));
        let nodes = NodeMap::new(&nodes_cfg, &table)?;
        let router =
            Router::new(cfg.latency.clone(), hub_rng).with_max_payload(cfg.hub.max_payload_bytes);
        let mut hub = CloudHub::new(router, nodes);
        hub.waypoint_spacing_m = cfg.hub.waypoint_spacing_m;
        let cyber = CyberSpace::new(cfg.cyber.mapping);
        let platoon = PlatoonService {
            order: vec![],
            kinds: BTreeMap::new(),
            commanded: BTreeMap::new(),
            gains: cfg.control.gains,
            profile: sc.leader_profile,
            caps: (sc.v_max_physical, sc.v_max_virtual),
        };
        let mut sim = Self {
            cfg: cfg.clone(),
            table,
            physical,
            workstation,
            hub,
            cyber,
            platoon,
            queue: BinaryHeap::new(),
            next_seq: 0,
            now: SimTime::ZERO,
            plant_dt: SimTime::from_secs_f64(cfg.emulator.plant_dt_s),
            control_dt: SimTime::from_secs_f64(cfg.control.gains.dt_s),
            kinds: BTreeMap::new(),
            platoon_enabled: true,
            record: true,
            platoon_log: vec![],
            controller_log: vec![],
            observations: vec![],
            local_delays: vec![],
            snapshots: vec![],
            external_outbox: vec![],
            counters: Counters::default(),
            abort: None,
        };
        sim.spawn_formation()?;
        for ev in [
            Event::Plant(1),
            Event::Cyber(1),
            Event::Capture(0),
            Event::HubTick(0),
            Event::Controller(0),
            Event::Workstation(0),
            Event::Snapshot(0),
            Event::Log(0),
        ] {
            let t = sim.periodic_time(&ev);
            sim.schedule(t, ev);
        }
        Ok(sim)
    }

    fn spawn_formation(&mut self) -> Result<(), ScenarioError> {
        let sc = self.cfg.scenario.clone();
        let ring = self.table.track.clone();
        let loop_waypoints = ring.resample(self.cfg.hub.waypoint_spacing_m);
        for (i, &kind) in sc.formation.iter().enumerate() {
            let id = VehicleId(i as u32 + 1);
            let arc = sc.start_arc_m - sc.initial_spacing_m * i as f64;
            let p = ring.point_at(arc);
            let state = VehicleState::at(p.x, p.y, ring.heading_at(arc), 0.0);
            let params = self.cfg.vehicle.with_speed_cap(sc.cap(kind));
            match kind {
                VehicleKind::Physical => {
                    self.physical.spawn(id, state, params);
                    self.workstation
                        .register(id, params, self.cfg.control.waypoint);
                    self.cyber.add_mapping(id, params);
                }
                VehicleKind::Virtual => {
                    self.cyber
                        .add_cloud(id, state, params, self.cfg.control.waypoint);
                }
            }
            self.hub.register_vehicle(id, kind)?;
            self.kinds.insert(id, kind);
            self.platoon.order.push(id);
            self.platoon.kinds.insert(id, kind);
            self.platoon.commanded.insert(id, 0.0);
            self.counters.commands_sent.insert(id, 0);
            let assignment = ModeAssignment {
                vehicle_id: id,
                mode: ControlMode::Waypoints {
                    waypoints: loop_waypoints.clone(),
                    looped: true,
                    cruise_speed_mps: Some(0.0),
                },
            };
            self.submit_assignment(&assignment)?;
        }
        Ok(())
    }

    fn periodic_time(&self, ev: &Event) -> SimTime {
        match *ev {
            Event::Plant(k) => SimTime(k * self.plant_dt.0),
            Event::Cyber(k) => tick_time(k, self.cfg.cyber.tick_hz),
            Event::Capture(k) => self.physical.vision.capture_time(k),
            Event::HubTick(k) => tick_time(k, self.cfg.hub.tick_hz),
            Event::Controller(k) => SimTime(k * self.control_dt.0),
            Event::Workstation(k) => tick_time(k, self.cfg.emulator.command_hz),
            Event::Snapshot(k) => tick_time(k, self.cfg.scenario.snapshot_hz),
            Event::Log(k) => tick_time(k, self.cfg.scenario.log_hz),
            _ => self.now,
        }
    }

    fn schedule(&mut self, time: SimTime, event: Event) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued {
            time,
            rank: event.rank(),
            seq,
            event,
        });
    }

    fn send(&mut self, source: EndpointId, dest: EndpointId, stage: Stage, payload: Payload) {
        match self.hub.router.send(self.now, source, dest, stage, payload) {
            Ok(s) => {
                if s.envelope.stage.via_hub() {
                    if let Payload::Observation(o) = &s.envelope.payload {
                        let o = *o;
                        self.schedule(s.envelope.t2, Event::HubRelay(o));
                    }
                }
                self.schedule(s.deliver_at, Event::Deliver(s.envelope));
            }
            Err(_) => self.counters.dead_letters += 1,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn config(&self) -> &TwinConfig {
        &self.cfg
    }

    pub fn table(&self) -> &SandTable {
        &self.table
    }

    pub fn hub(&self) -> &CloudHub {
        &self.hub
    }

    pub fn kinds(&self) -> &BTreeMap<VehicleId, VehicleKind> {
        &self.kinds
    }

    pub fn aborted(&self) -> Option<Abort> {
        self.abort
    }

    /// Turns the platoon service on or off (off leaves modes alone).
    pub fn set_platoon_enabled(&mut self, on: bool) {
        self.platoon_enabled = on;
    }

    /// Whether logs and snapshots are kept in memory.
    pub fn set_recording(&mut self, on: bool) {
        self.record = on;
    }

    /// Lets an external program receive messages.
    pub fn register_external(&mut self, n: u32) {
        self.hub.router.register(EndpointId::External(n));
    }

    /// Validates an assignment at the hub and forwards it to the owner.
    pub fn submit_assignment(&mut self, a: &ModeAssignment) -> Result<ResolvedMode, HubError> {
        let (owner, mode) = self.hub.assign_mode(a)?;
        self.send(
            EndpointId::Hub,
            owner,
            CloudHub::downlink_stage(owner),
            Payload::Mode(ModeDispatch {
                vehicle_id: a.vehicle_id,
                mode: mode.clone(),
            }),
        );
        Ok(mode)
    }

    /// Forwards a direct speed/steer command to the vehicle's owner.
    pub fn submit_command(&mut self, cmd: VehicleCommand) -> Result<(), HubError> {
        let reg = self
            .hub
            .registration(cmd.vehicle_id)
            .ok_or(HubError::UnknownVehicle(cmd.vehicle_id))?;
        if !(cmd.speed_mps.is_finite() && cmd.steer_rad.is_none_or(f64::is_finite)) {
            return Err(HubError::NonFinite);
        }
        self.send(
            EndpointId::Hub,
            reg.owner,
            CloudHub::downlink_stage(reg.owner),
            Payload::Command(cmd),
        );
        Ok(())
    }

    /// Feeds an externally produced localization fix to the workstation as
    /// if the overhead camera had emitted it now.
    pub fn inject_observation(&mut self, obs: PoseObservation) -> Result<(), ScenarioError> {
        if self.kinds.get(&obs.vehicle_id) != Some(&VehicleKind::Physical) {
            return Err(ScenarioError::Emulator(EmulatorError::UnknownVehicle(
                obs.vehicle_id,
            )));
        }
        if !(obs.x_m.is_finite() && obs.y_m.is_finite() && obs.heading_rad.is_finite()) {
            return Err(ScenarioError::Hub(HubError::NonFinite));
        }
        self.schedule(self.now, Event::VisionArrive(vec![obs]));
        Ok(())
    }

    /// Current hub world snapshot.
    pub fn snapshot(&mut self) -> WorldSnapshot {
        self.hub.snapshot_world(self.now)
    }

    /// Messages routed to external endpoints since the last call.
    pub fn drain_external(&mut self) -> Vec<(u32, Envelope)> {
        std::mem::take(&mut self.external_outbox)
    }

    pub fn truth(&self) -> Vec<TrackPosition> {
        let mut out: Vec<TrackPosition> = self
            .physical
            .vehicles
            .values()
            .map(|v| TrackPosition {
                id: v.id,
                kind: RecordKind::Mapping,
                x_m: v.state.x_m,
                y_m: v.state.y_m,
                speed_mps: v.state.speed_mps,
            })
            .collect();
        for id in self.kinds.keys() {
            if let Some(c) = self.cyber.cloud(*id) {
                out.push(TrackPosition {
                    id: *id,
                    kind: RecordKind::Cloud,
                    x_m: c.state.x_m,
                    y_m: c.state.y_m,
                    speed_mps: c.state.speed_mps,
                });
            }
        }
        out.sort_by_key(|p| p.id);
        out
    }

    /// True state of a vehicle, physical or cloud.
    pub fn vehicle_state(&self, id: VehicleId) -> Option<VehicleState> {
        self.physical
            .vehicles
            .get(&id)
            .map(|v| v.state)
            .or_else(|| self.cyber.cloud(id).map(|c| c.state))
    }

    /// Processes every event strictly before `until`. Returns false once
    /// the run has aborted.
    pub fn run_until(&mut self, until: SimTime) -> Result<bool, ScenarioError> {
        while self.abort.is_none() {
            match self.queue.peek() {
                Some(q) if q.time < until => {}
                _ => break,
            }
            let q = self.queue.pop().unwrap();
            self.now = q.time;
            self.handle(q.event)?;
        }
        if self.abort.is_none() && until > self.now {
            self.now = until;
        }
        Ok(self.abort.is_none())
    }

    fn reschedule(&mut self, ev: Event) {
        let t = self.periodic_time(&ev);
        self.schedule(t, ev);
    }

    fn handle(&mut self, ev: Event) -> Result<(), ScenarioError> {
        match ev {
            Event::Plant(k) => {
                self.physical.step()?;
                self.reschedule(Event::Plant(k + 1));
            }
            Event::Cyber(k) => {
                let dt = 1.0 / self.cfg.cyber.tick_hz as f64;
                self.cyber.tick(self.now, dt)?;
                let snap = WorldSnapshot {
                    seq: k,
                    time: self.now,
                    vehicles: self.cyber.records(self.now),
                };
                // Uplink to the hub reuses the hub↔cyber link statistics.
                self.send(
                    EndpointId::CyberSpace,
                    EndpointId::Hub,
                    Stage::HubToCyber,
                    Payload::WorldState(snap),
                );
                self.reschedule(Event::Cyber(k + 1));
            }
            Event::Capture(k) => {
                if let Some(frame) = self.physical.capture(&self.cfg.latency) {
                    self.local_delays.push(DelayRecord {
                        seq: None,
                        stage: Stage::CameraToWorkstation,
                        t1: frame.capture_time,
                        t2: frame.capture_time,
                        t3: frame.emit_time,
                    });
                    if self.record {
                        for (o, s) in frame.observations.iter().zip(&frame.truth) {
                            self.observations.push(ObservationRow {
                                capture_s: o.capture_time.as_secs_f64(),
                                emit_s: o.emit_time.as_secs_f64(),
                                vehicle_id: o.vehicle_id,
                                x_m: o.x_m,
                                y_m: o.y_m,
                                heading_rad: o.heading_rad,
                                true_x_m: s.x_m,
                                true_y_m: s.y_m,
                                true_heading_rad: s.heading_rad,
                                true_speed_mps: s.speed_mps,
                                out_of_bounds: o.out_of_bounds,
                            });
                        }
                    }
                    if !frame.observations.is_empty() {
                        self.schedule(frame.emit_time, Event::VisionArrive(frame.observations));
                    }
                }
                self.reschedule(Event::Capture(k + 1));
            }
            Event::VisionArrive(obs) => {
                for o in obs {
                    self.workstation.on_observation(o)?;
                    self.send(
                        EndpointId::Workstation,
                        EndpointId::CyberSpace,
                        Stage::WorkstationToCyber,
                        Payload::Observation(o),
                    );
                }
            }
            Event::HubRelay(o) => self.hub.offer_observation(&o),
            Event::Deliver(env) => {
                let env = self.hub.router.deliver(env, self.now);
                self.on_delivery(env)?;
            }
            Event::VehicleArrive(cmd) => {
                self.physical.deliver_command(&cmd)?;
            }
            Event::HubTick(k) => {
                self.hub.tick();
                self.reschedule(Event::HubTick(k + 1));
            }
            Event::Controller(k) => {
                if self.platoon_enabled {
                    self.platoon_tick();
                }
                self.reschedule(Event::Controller(k + 1));
            }
            Event::Workstation(k) => {
                for cmd in self.workstation.tick(self.now) {
                    let delay = self.physical.command_delay_ms(&self.cfg.latency);
                    let at = self.now + SimTime::from_millis_f64(delay);
                    self.local_delays.push(DelayRecord {
                        seq: None,
                        stage: Stage::WorkstationToVehicle,
                        t1: self.now,
                        t2: self.now,
                        t3: at,
                    });
                    *self
                        .counters
                        .commands_sent
                        .entry(cmd.vehicle_id)
                        .or_default() += 1;
                    self.schedule(at, Event::VehicleArrive(cmd));
                }
                self.reschedule(Event::Workstation(k + 1));
            }
            Event::Snapshot(k) => {
                if self.record {
                    let s = self.hub.snapshot_world(self.now);
                    self.snapshots.push(s);
                }
                self.reschedule(Event::Snapshot(k + 1));
            }
            Event::Log(k) => {
                self.log_tick();
                self.reschedule(Event::Log(k + 1));
            }
        }
        Ok(())
    }

    fn on_delivery(&mut self, env: Envelope) -> Result<(), ScenarioError> {
        match (env.destination, &env.payload) {
            (EndpointId::CyberSpace, Payload::Observation(o)) => {
                self.cyber.on_observation(o, self.now)?;
            }
            (EndpointId::Workstation, Payload::Mode(d)) => {
                self.workstation.on_mode(d.vehicle_id, d.mode.clone())?;
            }
            (EndpointId::CyberSpace, Payload::Mode(d)) => {
                self.cyber.on_mode(d.vehicle_id, d.mode.clone())?
            }
            (EndpointId::Workstation, Payload::Command(c)) => {
                if !self.workstation.on_command(c)? {
                    self.counters.rejected_commands += 1;
                }
            }
            (EndpointId::CyberSpace, Payload::Command(c)) => {
                if !self.cyber.on_command(c)? {
                    self.counters.rejected_commands += 1;
                }
            }
            (EndpointId::Hub, Payload::WorldState(s)) => {
                for rec in &s.vehicles {
                    self.hub.offer_record(*rec);
                }
            }
            (EndpointId::External(n), _) => self.external_outbox.push((n, env)),
            _ => {}
        }
        Ok(())
    }

    fn platoon_tick(&mut self) {
        let t = self.now.as_secs_f64();
        let positions: Vec<TrackPosition> = self
            .kinds
            .keys()
            .filter_map(|id| self.hub.world_record(*id))
            .map(TrackPosition::from)
            .collect();
        let view = compose_world(
            &positions,
            &self.table.track,
            self.cfg.vehicle.body_length_m,
        );
        let rows = self.platoon.tick(t, &view, &self.cfg.vehicle);
        for row in &rows {
            let owner = self.hub.registration(row.vehicle_id).map(|r| r.owner);
            if let Some(owner) = owner {
                let cmd = VehicleCommand {
                    vehicle_id: row.vehicle_id,
                    speed_mps: row.speed_cmd_mps,
                    steer_rad: None,
                    source: CommandSource::Platoon,
                };
                self.send(
                    EndpointId::Hub,
                    owner,
                    CloudHub::downlink_stage(owner),
                    Payload::Command(cmd),
                );
            }
        }
        if self.record {
            self.controller_log.extend(rows);
        }
    }

    fn log_tick(&mut self) {
        let truth = self.truth();
        let view = compose_world(&truth, &self.table.track, self.cfg.vehicle.body_length_m);
        let t = self.now.as_secs_f64();
        if let Some((p, f)) = view.collision {
            let spacing = view.member(f).and_then(|m| m.spacing_m).unwrap_or(0.0);
            self.abort = Some(Abort {
                time_s: t,
                predecessor: p,
                follower: f,
                spacing_m: spacing,
            });
        }
        if !self.record {
            return;
        }
        let body = self.cfg.vehicle.body_length_m;
        let mut rows: Vec<PlatoonRow> = view
            .members
            .iter()
            .map(|m| PlatoonRow {
                time_s: t,
                vehicle_id: m.id,
                kind: self.kinds[&m.id],
                arc_pos_m: m.arc_m,
                speed_mps: m.speed_mps,
                predecessor: m.predecessor,
                spacing_to_pred_m: m.spacing_m,
                gap_m: m.spacing_m.map(|s| s - body),
            })
            .collect();
        rows.sort_by_key(|r| r.vehicle_id);
        self.platoon_log.extend(rows);
    }

    /// Runs to the configured duration (or an abort) and collects outputs.
    pub fn finish(mut self) -> Result<RunOutput, ScenarioError> {
        let end = SimTime::from_secs_f64(self.cfg.scenario.duration_s);
        self.run_until(end)?;
        Ok(self.into_output())
    }

    fn into_output(mut self) -> RunOutput {
        self.counters.captures = self.physical.vision.frames_captured();
        self.counters.vision_outputs = self.physical.vision.frames_emitted();
        self.counters.dead_letters = self.hub.router.stats().dead;
        for id in self.kinds.keys() {
            self.counters
                .stale_holds
                .insert(*id, self.workstation.stale_holds(*id));
            self.counters.dropped_observations += self.cyber.mapping(*id).map_or(0, |m| m.dropped);
            self.counters.control_errors += self.workstation.control_errors(*id);
        }
        self.counters.control_errors += self.cyber.control_errors();
        let mut delays = self.local_delays;
        delays.extend_from_slice(self.hub.router.delays());
        delays.sort_by_key(|d| (d.t1, d.stage, d.t3, d.seq));
        RunOutput {
            config: self.cfg,
            kinds: self.kinds,
            platoon_log: self.platoon_log,
            controller_log: self.controller_log,
            observations: self.observations,
            delays,
            dead_letters: self.hub.router.dead_letters().to_vec(),
            snapshots: self.snapshots,
            counters: self.counters,
            abort: self.abort,
            end_time: self.now,
        }
    }
}

/// Runs the configured experiment end to end.
pub fn run_experiment(cfg: &TwinConfig) -> Result<RunOutput, ScenarioError> {
    Simulation::new(cfg)?.finish()
}
