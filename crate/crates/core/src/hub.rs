//! Cloud hub: message routing with per-stage delays, world-state batching,
//! the calibrated node map and control-mode validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use petgraph::algo::{astar, kosaraju_scc};
use petgraph::graph::{DiGraph, NodeIndex};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimTime;
use crate::control::{ARRIVAL_TOLERANCE_M, OFF_TRACK_M};
use crate::emulator::PoseObservation;
use crate::latency::{sample_latency, LatencyModel, Stage};
use crate::modes::{ControlMode, ModeAssignment, ResolvedMode, VehicleCommand};
use crate::track::PathError;
use crate::world::{RecordKind, VehicleId, VehicleKind, VehicleRecord, WorldSnapshot};
use crate::{Path, Point, SandTable, VehicleState};

/// Payloads above this serialized size are rejected.
pub const MAX_PAYLOAD_BYTES: usize = 1 << 20;

/// Relative tolerance on waypoint spacing.
pub const SPACING_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HubError {
    #[error("vehicle {0} is not registered")]
    UnknownVehicle(VehicleId),
    #[error("vehicle {0} is already registered")]
    DuplicateVehicle(VehicleId),
    #[error("node {0} is not in the node map")]
    UnknownNode(u32),
    #[error("waypoint list is empty")]
    EmptyWaypoints,
    #[error(
        "waypoint spacing varies from {min_m:.4} to {max_m:.4} m (tolerance {SPACING_TOLERANCE})"
    )]
    NonEquidistant { min_m: f64, max_m: f64 },
    #[error("non-finite value in mode assignment")]
    NonFinite,
    #[error("no pose known for vehicle {0}")]
    NoPose(VehicleId),
    #[error("already at node {0}")]
    AlreadyAtNode(u32),
    #[error("no route to node {0}")]
    NoRoute(u32),
    #[error("invalid node map: {0}")]
    InvalidMap(String),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Addressable participant of the message fabric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "endpoint", content = "id", rename_all = "snake_case")]
pub enum EndpointId {
    Camera,
    Workstation,
    Hub,
    CyberSpace,
    Vehicle(VehicleId),
    External(u32),
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EndpointId::Camera => write!(f, "camera"),
            EndpointId::Workstation => write!(f, "workstation"),
            EndpointId::Hub => write!(f, "hub"),
            EndpointId::CyberSpace => write!(f, "cyber"),
            EndpointId::Vehicle(id) => write!(f, "vehicle/{id}"),
            EndpointId::External(n) => write!(f, "external/{n}"),
        }
    }
}

/// Mode handed to a vehicle's owner after hub validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeDispatch {
    pub vehicle_id: VehicleId,
    pub mode: ResolvedMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "body", rename_all = "snake_case")]
pub enum Payload {
    Observation(PoseObservation),
    Command(VehicleCommand),
    Mode(ModeDispatch),
    WorldState(WorldSnapshot),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Observation(_) => "observation",
            Payload::Command(_) => "command",
            Payload::Mode(_) => "mode",
            Payload::WorldState(_) => "world_state",
        }
    }
}

/// Timestamped message. `t3` is set on delivery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub source: EndpointId,
    pub destination: EndpointId,
    pub stage: Stage,
    pub payload: Payload,
    pub t1: SimTime,
    pub t2: SimTime,
    pub t3: Option<SimTime>,
}

/// Delivery scheduled by the router.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheduled {
    pub deliver_at: SimTime,
    pub envelope: Envelope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeadReason {
    UnknownDestination,
    Oversized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub seq: u64,
    pub time: SimTime,
    pub source: EndpointId,
    pub destination: EndpointId,
    pub stage: Stage,
    pub kind: String,
    pub reason: DeadReason,
    pub detail: String,
}

/// One delivered message's timing. `seq` is the router sequence number;
/// links that bypass the router (camera, vehicle radio) have none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    pub stage: Stage,
    pub t1: SimTime,
    pub t2: SimTime,
    pub t3: SimTime,
}

impl DelayRecord {
    pub fn delay_ms(&self) -> f64 {
        (self.t3 - self.t1).as_millis_f64()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterStats {
    pub accepted: u64,
    pub delivered: u64,
    pub dead: u64,
}

impl RouterStats {
    pub fn in_flight(&self) -> u64 {
        self.accepted - self.delivered
    }
}

#[derive(Debug, Clone, Copy)]
struct LinkState {
    sent_at: SimTime,
    stage: Stage,
    delay: SimTime,
    deliver_at: SimTime,
}

/// Stamps, delays and orders messages. Delivery is FIFO per
/// (source, destination) pair: a message never overtakes an earlier one on
/// the same pair, it waits behind it instead. Messages sent on one pair at
/// the same instant travel as one batch and share a single delay draw.
pub struct Router {
    latency: LatencyModel,
    rng: ChaCha8Rng,
    max_payload_bytes: usize,
    registered: BTreeSet<EndpointId>,
    last_delivery: BTreeMap<(EndpointId, EndpointId), LinkState>,
    next_seq: u64,
    stats: RouterStats,
    delays: Vec<DelayRecord>,
    dead: Vec<DeadLetter>,
}

impl Router {
    pub fn new(latency: LatencyModel, rng: ChaCha8Rng) -> Self {
        Self {
            latency,
            rng,
            max_payload_bytes: MAX_PAYLOAD_BYTES,
            registered: BTreeSet::new(),
            last_delivery: BTreeMap::new(),
            next_seq: 0,
            stats: RouterStats::default(),
            delays: Vec::new(),
            dead: Vec::new(),
        }
    }

    pub fn with_max_payload(mut self, bytes: usize) -> Self {
        self.max_payload_bytes = bytes;
        self
    }

    pub fn latency(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn register(&mut self, ep: EndpointId) {
        self.registered.insert(ep);
    }

    pub fn is_registered(&self, ep: EndpointId) -> bool {
        self.registered.contains(&ep)
    }

    pub fn stats(&self) -> RouterStats {
        self.stats
    }

    pub fn delays(&self) -> &[DelayRecord] {
        &self.delays
    }

    pub fn dead_letters(&self) -> &[DeadLetter] {
        &self.dead
    }

    /// Accepts a message sent at `now` and schedules its delivery, or
    /// dead-letters it.
    pub fn send(
        &mut self,
        now: SimTime,
        source: EndpointId,
        destination: EndpointId,
        stage: Stage,
        payload: Payload,
    ) -> Result<Scheduled, DeadLetter> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let reject = |reason, detail: String| DeadLetter {
            seq,
            time: now,
            source,
            destination,
            stage,
            kind: payload.kind().to_string(),
            reason,
            detail,
        };
        let dead = if !self.registered.contains(&destination) {
            Some(reject(
                DeadReason::UnknownDestination,
                format!("no endpoint {destination}"),
            ))
        } else {
            let size = serde_json::to_vec(&payload).map_or(usize::MAX, |v| v.len());
            (size > self.max_payload_bytes).then(|| {
                reject(
                    DeadReason::Oversized,
                    format!("{size} bytes exceeds {}", self.max_payload_bytes),
                )
            })
        };
        if let Some(d) = dead {
            self.stats.dead += 1;
            self.dead.push(d.clone());
            return Err(d);
        }
        let pair = (source, destination);
        let last = self.last_delivery.get(&pair).copied();
        let delay = match last {
            Some(l) if l.sent_at == now && l.stage == stage => l.delay,
            _ => SimTime::from_millis_f64(sample_latency(stage, &self.latency, &mut self.rng)),
        };
        // Stage 2 is relayed by the hub; its arrival there is taken at the
        // midpoint of the sampled delay.
        let t2 = if stage.via_hub() {
            now + SimTime(delay.0 / 2)
        } else {
            now
        };
        let mut deliver_at = now + delay;
        if let Some(l) = last {
            deliver_at = deliver_at.max(l.deliver_at);
        }
        self.last_delivery.insert(
            pair,
            LinkState {
                sent_at: now,
                stage,
                delay,
                deliver_at,
            },
        );
        self.stats.accepted += 1;
        Ok(Scheduled {
            deliver_at,
            envelope: Envelope {
                seq,
                source,
                destination,
                stage,
                payload,
                t1: now,
                t2,
                t3: None,
            },
        })
    }

    /// Marks a scheduled envelope delivered at `now` and logs its delay.
    pub fn deliver(&mut self, mut env: Envelope, now: SimTime) -> Envelope {
        env.t3 = Some(now);
        self.stats.delivered += 1;
        self.delays.push(DelayRecord {
            seq: Some(env.seq),
            stage: env.stage,
            t1: env.t1,
            t2: env.t2,
            t3: now,
        });
        env
    }
}

/// Calibrated node of the road network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: u32,
    pub x_m: f64,
    pub y_m: f64,
}

impl NodeSpec {
    pub fn point(&self) -> Point {
        Point::new(self.x_m, self.y_m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum EdgeShape {
    /// Follows the outer ring in travel direction.
    Ring,
    Straight,
    Polyline {
        via: Vec<Point>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: u32,
    pub to: u32,
    #[serde(flatten)]
    pub shape: EdgeShape,
    /// Also add the reverse edge.
    #[serde(default)]
    pub bidirectional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMapConfig {
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
}

impl NodeMapConfig {
    /// Twelve nodes: ten spread evenly along the ring (node 0 at the middle
    /// of the bottom straight, node 5 at the middle of the top straight) and
    /// two on a two-way cross road joining nodes 0 and 5.
    pub fn default_for(table: &SandTable) -> Self {
        let ring = &table.track;
        let len = ring.length();
        let mut nodes: Vec<NodeSpec> = (0..10)
            .map(|k| {
                let p = ring.point_at(len * k as f64 / 10.0);
                NodeSpec {
                    id: k,
                    x_m: p.x,
                    y_m: p.y,
                }
            })
            .collect();
        let (bottom, top) = (nodes[0].point(), nodes[5].point());
        for (id, f) in [(10, 1.0 / 3.0), (11, 2.0 / 3.0)] {
            nodes.push(NodeSpec {
                id,
                x_m: bottom.x + (top.x - bottom.x) * f,
                y_m: bottom.y + (top.y - bottom.y) * f,
            });
        }
        let mut edges: Vec<EdgeSpec> = (0..10)
            .map(|k| EdgeSpec {
                from: k,
                to: (k + 1) % 10,
                shape: EdgeShape::Ring,
                bidirectional: false,
            })
            .collect();
        for (a, b) in [(0, 10), (10, 11), (11, 5)] {
            edges.push(EdgeSpec {
                from: a,
                to: b,
                shape: EdgeShape::Straight,
                bidirectional: true,
            });
        }
        Self { nodes, edges }
    }
}

impl Default for NodeMapConfig {
    fn default() -> Self {
        Self::default_for(&SandTable::default())
    }
}

#[derive(Debug, Clone)]
struct Edge {
    from: u32,
    to: u32,
    geometry: Path,
}

/// Directed lane graph over the calibrated nodes.
#[derive(Debug, Clone)]
pub struct NodeMap {
    nodes: BTreeMap<u32, NodeSpec>,
    index: BTreeMap<u32, NodeIndex>,
    graph: DiGraph<u32, f64>,
    edges: Vec<Edge>,
    /// Turn graph: one vertex per edge, arcs for allowed continuations
    /// weighted by the next edge's length.
    turns: DiGraph<usize, f64>,
}

/// Distance within which a node counts as lying on the ring centreline.
const ON_LANE_M: f64 = 1e-3;

impl NodeMap {
    pub fn new(cfg: &NodeMapConfig, table: &SandTable) -> Result<Self, HubError> {
        let mut nodes = BTreeMap::new();
        for n in &cfg.nodes {
            if !(n.x_m.is_finite() && n.y_m.is_finite()) {
                return Err(HubError::NonFinite);
            }
            if nodes.insert(n.id, *n).is_some() {
                return Err(HubError::InvalidMap(format!("duplicate node {}", n.id)));
            }
        }
        let ring = &table.track;
        let mut edges = Vec::new();
        for e in &cfg.edges {
            let a = nodes.get(&e.from).ok_or(HubError::UnknownNode(e.from))?;
            let b = nodes.get(&e.to).ok_or(HubError::UnknownNode(e.to))?;
            let forward = match &e.shape {
                EdgeShape::Ring => {
                    let pa = ring.project(a.point());
                    let pb = ring.project(b.point());
                    for (n, p) in [(a, pa), (b, pb)] {
                        if p.distance_m > ON_LANE_M {
                            return Err(HubError::InvalidMap(format!(
                                "node {} is {:.3} m off the ring",
                                n.id, p.distance_m
                            )));
                        }
                    }
                    let mut pts = ring.slice(pa.arc_m, pb.arc_m, 0.02);
                    // Pin the ends to the calibrated coordinates.
                    *pts.first_mut().unwrap() = a.point();
                    *pts.last_mut().unwrap() = b.point();
                    pts
                }
                EdgeShape::Straight => vec![a.point(), b.point()],
                EdgeShape::Polyline { via } => {
                    let mut pts = vec![a.point()];
                    pts.extend(via.iter().copied());
                    pts.push(b.point());
                    pts
                }
            };
            let geometry = Path::new(forward.clone(), false)?;
            edges.push(Edge {
                from: e.from,
                to: e.to,
                geometry,
            });
            if e.bidirectional {
                let mut back = forward;
                back.reverse();
                edges.push(Edge {
                    from: e.to,
                    to: e.from,
                    geometry: Path::new(back, false)?,
                });
            }
        }
        let mut graph = DiGraph::new();
        let index: BTreeMap<u32, NodeIndex> =
            nodes.keys().map(|&id| (id, graph.add_node(id))).collect();
        let mut turns = DiGraph::new();
        for (i, e) in edges.iter().enumerate() {
            graph.add_edge(index[&e.from], index[&e.to], e.geometry.length());
            turns.add_node(i);
        }
        for (i, a) in edges.iter().enumerate() {
            for (j, b) in edges.iter().enumerate() {
                let u_turn = b.to == a.from && b.from == a.to;
                if b.from == a.to && !u_turn {
                    turns.add_edge(NodeIndex::new(i), NodeIndex::new(j), b.geometry.length());
                }
            }
        }
        if !nodes.is_empty() && kosaraju_scc(&graph).len() != 1 {
            return Err(HubError::InvalidMap(
                "graph is not strongly connected".into(),
            ));
        }
        Ok(Self {
            nodes,
            index,
            graph,
            edges,
            turns,
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    pub fn node(&self, id: u32) -> Option<&NodeSpec> {
        self.nodes.get(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shortest node sequence and its length.
    pub fn shortest(&self, from: u32, to: u32) -> Option<(f64, Vec<u32>)> {
        let (a, b) = (*self.index.get(&from)?, *self.index.get(&to)?);
        astar(&self.graph, a, |n| n == b, |e| *e.weight(), |_| 0.0)
            .map(|(cost, path)| (cost, path.into_iter().map(|n| self.graph[n]).collect()))
    }

    /// Cheapest edge sequence starting with edge `first` and ending on an
    /// edge into `target`, never reversing onto the edge just travelled.
    fn edge_route(&self, first: usize, target: u32) -> Option<(f64, Vec<usize>)> {
        let start = NodeIndex::new(first);
        astar(
            &self.turns,
            start,
            |n| self.edges[self.turns[n]].to == target,
            |e| *e.weight(),
            |_| 0.0,
        )
        .map(|(cost, path)| (cost, path.into_iter().map(|n| self.turns[n]).collect()))
    }

    /// Lane path from `pose` to node `target` as waypoints with equal
    /// straight-line spacing near `spacing_m`. The last waypoint is the
    /// node itself. The route starts on the nearest edge travelled in the
    /// pose's direction and never makes a U-turn at a node.
    pub fn route(
        &self,
        pose: &VehicleState,
        target: u32,
        spacing_m: f64,
    ) -> Result<Vec<Point>, HubError> {
        let goal = self
            .nodes
            .get(&target)
            .ok_or(HubError::UnknownNode(target))?;
        let here = Point::new(pose.x_m, pose.y_m);
        let (dir_x, dir_y) = pose.direction();
        let nearest = self
            .edges
            .iter()
            .map(|e| e.geometry.project(here).distance_m)
            .fold(f64::INFINITY, f64::min);
        if nearest > OFF_TRACK_M {
            return Err(HubError::NoRoute(target));
        }
        let mut best: Option<(f64, usize, f64, Vec<usize>)> = None;
        for (i, e) in self.edges.iter().enumerate() {
            let proj = e.geometry.project(here);
            if proj.distance_m > nearest + ON_LANE_M {
                continue;
            }
            let h = e.geometry.heading_at(proj.arc_m);
            if h.sin() * dir_x + h.cos() * dir_y < 0.0 {
                continue;
            }
            let rest = e.geometry.length() - proj.arc_m;
            let Some((tail, seq)) = self.edge_route(i, target) else {
                continue;
            };
            let cost = rest + tail;
            if best.as_ref().is_none_or(|(c, ..)| cost < *c) {
                best = Some((cost, i, proj.arc_m, seq));
            }
        }
        let (_, first, arc, seq) = best.ok_or(HubError::NoRoute(target))?;
        let e = &self.edges[first];
        let mut pts = vec![here];
        pts.extend(e.geometry.slice(arc, e.geometry.length(), spacing_m));
        for &j in &seq[1..] {
            pts.extend_from_slice(&self.edges[j].geometry.vertices()[1..]);
        }
        let path = match Path::new(pts, false) {
            Ok(p) => p,
            Err(PathError::TooShort) => return Err(HubError::AlreadyAtNode(target)),
            Err(e) => return Err(e.into()),
        };
        if path.length() <= ARRIVAL_TOLERANCE_M && here.dist(&goal.point()) <= ARRIVAL_TOLERANCE_M {
            return Err(HubError::AlreadyAtNode(target));
        }
        Ok(path.resample_chords(spacing_m))
    }
}

/// Checks that consecutive waypoints are equally spaced within
/// [`SPACING_TOLERANCE`] of their mean.
pub fn validate_waypoints(waypoints: &[Point]) -> Result<(), HubError> {
    if waypoints.is_empty() {
        return Err(HubError::EmptyWaypoints);
    }
    if waypoints
        .iter()
        .any(|p| !(p.x.is_finite() && p.y.is_finite()))
    {
        return Err(HubError::NonFinite);
    }
    if waypoints.len() < 2 {
        return Err(HubError::Path(PathError::TooShort));
    }
    let gaps: Vec<f64> = waypoints.windows(2).map(|w| w[0].dist(&w[1])).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let (min_m, max_m) = gaps.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &g| {
        (lo.min(g), hi.max(g))
    });
    if !(mean > 0.0)
        || (max_m - mean) > SPACING_TOLERANCE * mean
        || (mean - min_m) > SPACING_TOLERANCE * mean
    {
        return Err(HubError::NonEquidistant { min_m, max_m });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub kind: VehicleKind,
    /// Endpoint that executes control modes for the vehicle.
    pub owner: EndpointId,
}

/// Hub state beyond routing: registrations, node map and the merged world
/// view.
pub struct CloudHub {
    pub router: Router,
    pub nodes: NodeMap,
    pub waypoint_spacing_m: f64,
    vehicles: BTreeMap<VehicleId, Registration>,
    inbox: BTreeMap<VehicleId, VehicleRecord>,
    world: BTreeMap<VehicleId, VehicleRecord>,
    last_snapshot: Option<SimTime>,
    snapshot_seq: u64,
}

impl CloudHub {
    pub fn new(router: Router, nodes: NodeMap) -> Self {
        let mut hub = Self {
            router,
            nodes,
            waypoint_spacing_m: 0.1,
            vehicles: BTreeMap::new(),
            inbox: BTreeMap::new(),
            world: BTreeMap::new(),
            last_snapshot: None,
            snapshot_seq: 0,
        };
        for ep in [
            EndpointId::Hub,
            EndpointId::Workstation,
            EndpointId::CyberSpace,
        ] {
            hub.router.register(ep);
        }
        hub
    }

    pub fn register_vehicle(
        &mut self,
        id: VehicleId,
        kind: VehicleKind,
    ) -> Result<Registration, HubError> {
        if self.vehicles.contains_key(&id) {
            return Err(HubError::DuplicateVehicle(id));
        }
        let owner = match kind {
            VehicleKind::Physical => EndpointId::Workstation,
            VehicleKind::Virtual => EndpointId::CyberSpace,
        };
        let reg = Registration { kind, owner };
        self.vehicles.insert(id, reg);
        self.router.register(EndpointId::Vehicle(id));
        Ok(reg)
    }

    pub fn registration(&self, id: VehicleId) -> Option<Registration> {
        self.vehicles.get(&id).copied()
    }

    pub fn vehicles(&self) -> impl Iterator<Item = (&VehicleId, &Registration)> {
        self.vehicles.iter()
    }

    /// Stage used for hub → owner traffic.
    pub fn downlink_stage(owner: EndpointId) -> Stage {
        match owner {
            EndpointId::Workstation => Stage::HubToWorkstation,
            _ => Stage::HubToCyber,
        }
    }

    /// Validates an assignment and resolves node targets. The returned
    /// mode goes to the owner, which swaps it in at its next control tick.
    pub fn assign_mode(&self, a: &ModeAssignment) -> Result<(EndpointId, ResolvedMode), HubError> {
        let reg = self
            .vehicles
            .get(&a.vehicle_id)
            .ok_or(HubError::UnknownVehicle(a.vehicle_id))?;
        let resolved = match &a.mode {
            ControlMode::Direct {
                speed_mps,
                steer_rad,
            } => {
                if !(speed_mps.is_finite() && steer_rad.is_finite()) {
                    return Err(HubError::NonFinite);
                }
                ResolvedMode::Direct {
                    speed_mps: *speed_mps,
                    steer_rad: *steer_rad,
                }
            }
            ControlMode::Waypoints {
                waypoints,
                looped,
                cruise_speed_mps,
            } => {
                validate_waypoints(waypoints)?;
                if cruise_speed_mps.is_some_and(|c| !c.is_finite()) {
                    return Err(HubError::NonFinite);
                }
                ResolvedMode::Follow {
                    waypoints: waypoints.clone(),
                    looped: *looped,
                    cruise_speed_mps: *cruise_speed_mps,
                    node_id: None,
                }
            }
            ControlMode::Node { node_id } => {
                if self.nodes.node(*node_id).is_none() {
                    return Err(HubError::UnknownNode(*node_id));
                }
                let rec = self
                    .world
                    .get(&a.vehicle_id)
                    .ok_or(HubError::NoPose(a.vehicle_id))?;
                let pose = VehicleState::at(rec.x_m, rec.y_m, rec.heading_rad, rec.speed_mps);
                let waypoints = self.nodes.route(&pose, *node_id, self.waypoint_spacing_m)?;
                ResolvedMode::Follow {
                    waypoints,
                    looped: false,
                    cruise_speed_mps: None,
                    node_id: Some(*node_id),
                }
            }
            ControlMode::Restore => ResolvedMode::Restore,
        };
        Ok((reg.owner, resolved))
    }

    /// Queues a record for the next batch; newest stamp wins per vehicle.
    pub fn offer_record(&mut self, rec: VehicleRecord) {
        if !self.vehicles.contains_key(&rec.id) {
            return;
        }
        match self.inbox.get(&rec.id) {
            Some(old) if old.stamp > rec.stamp => {}
            _ => {
                self.inbox.insert(rec.id, rec);
            }
        }
    }

    /// Records a physical observation passing through the hub.
    pub fn offer_observation(&mut self, obs: &PoseObservation) {
        let speed = self.world.get(&obs.vehicle_id).map_or(0.0, |r| r.speed_mps);
        self.offer_record(VehicleRecord {
            id: obs.vehicle_id,
            kind: RecordKind::Mapping,
            x_m: obs.x_m,
            y_m: obs.y_m,
            heading_rad: obs.heading_rad,
            speed_mps: speed,
            stamp: obs.capture_time,
        });
    }

    /// Batch boundary: merges the inbox into the world view.
    pub fn tick(&mut self) {
        for (id, rec) in std::mem::take(&mut self.inbox) {
            match self.world.get(&id) {
                Some(old) if old.stamp > rec.stamp => {}
                _ => {
                    self.world.insert(id, rec);
                }
            }
        }
    }

    pub fn world_record(&self, id: VehicleId) -> Option<&VehicleRecord> {
        self.world.get(&id)
    }

    /// Consistent view of the world at `now`. Timestamps strictly increase
    /// across calls.
    pub fn snapshot_world(&mut self, now: SimTime) -> WorldSnapshot {
        let time = match self.last_snapshot {
            Some(last) if now <= last => last + SimTime(1),
            _ => now,
        };
        self.last_snapshot = Some(time);
        let seq = self.snapshot_seq;
        self.snapshot_seq += 1;
        WorldSnapshot {
            seq,
            time,
            vehicles: self.world.values().copied().collect(),
        }
    }
}
