//! TCP front end. Live mode paces a [`Simulation`] against the wall clock
//! and serves clients; replay mode streams archived snapshots.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::SimTime;
use crate::modes::CommandSource;
use crate::scenario::{ScenarioError, Simulation};
use crate::telemetry::{replay, TelemetryError, WallClockPacer};
use crate::wire::{read_frame, write_frame, Message, WireError};
use crate::world::WorldSnapshot;

const SERVER_NAME: &str = "twinbed";
const WRITE_TIMEOUT: Duration = Duration::from_secs(2);
const IDLE_POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("invalid option: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiveOptions {
    /// Virtual seconds per wall-clock second.
    pub speed_factor: f64,
    /// Wall-clock period of the serving loop.
    pub step: Duration,
    /// Stop once virtual time reaches this many seconds.
    pub duration_s: Option<f64>,
    /// Rate of pushed snapshots to subscribers, in virtual time.
    pub snapshot_hz: u64,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            speed_factor: 1.0,
            step: Duration::from_millis(10),
            duration_s: None,
            snapshot_hz: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LiveStats {
    pub sim_time: SimTime,
    pub clients: u64,
    pub messages: u64,
    pub snapshots_pushed: u64,
}

enum Inbound {
    Message(u64, Message),
    Gone(u64),
}

struct Client {
    stream: TcpStream,
    subscribed: bool,
}

fn spawn_reader(id: u64, stream: TcpStream, tx: Sender<Inbound>) {
    thread::spawn(move || {
        let mut stream = stream;
        loop {
            match read_frame(&mut stream) {
                Ok(m) => {
                    if tx.send(Inbound::Message(id, m)).is_err() {
                        return;
                    }
                }
                Err(WireError::Json(e)) => {
                    let _ = tx.send(Inbound::Message(
                        id,
                        Message::error(format!("malformed message: {e}")),
                    ));
                }
                Err(_) => {
                    let _ = tx.send(Inbound::Gone(id));
                    return;
                }
            }
        }
    });
}

fn accept_pending(
    listener: &TcpListener,
    next_id: &mut u64,
    clients: &mut BTreeMap<u64, Client>,
    tx: &Sender<Inbound>,
) -> Result<u64, ServerError> {
    let mut accepted = 0;
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
                let id = *next_id;
                *next_id += 1;
                spawn_reader(id, stream.try_clone()?, tx.clone());
                clients.insert(
                    id,
                    Client {
                        stream,
                        subscribed: false,
                    },
                );
                accepted += 1;
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => return Ok(accepted),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Answers one client message against the live simulation.
fn respond(sim: &mut Simulation, msg: Message, subscribed: &mut bool) -> Option<Message> {
    Some(match msg {
        Message::Hello { .. } => Message::hello(SERVER_NAME),
        Message::Observe { observation } => match sim.inject_observation(observation) {
            Ok(()) => Message::Ack { mode: None },
            Err(e) => Message::error(e),
        },
        Message::Command { mut command } => {
            command.source = CommandSource::External;
            match sim.submit_command(command) {
                Ok(()) => Message::Ack { mode: None },
                Err(e) => Message::error(e),
            }
        }
        Message::AssignMode { assignment } => match sim.submit_assignment(&assignment) {
            Ok(mode) => Message::Ack { mode: Some(mode) },
            Err(e) => Message::error(e),
        },
        Message::SnapshotRequest { subscribe } => {
            *subscribed |= subscribe;
            Message::Snapshot {
                snapshot: sim.snapshot(),
            }
        }
        Message::Error { .. } => msg,
        Message::Snapshot { .. } | Message::Ack { .. } => {
            Message::error("snapshot and ack messages are server-to-client only")
        }
    })
}

/// Runs `sim` paced against the wall clock and serves clients on
/// `listener` until `stop` is set or the configured duration is reached.
pub fn serve_live(
    listener: TcpListener,
    mut sim: Simulation,
    opts: &LiveOptions,
    stop: &AtomicBool,
) -> Result<LiveStats, ServerError> {
    if !(opts.speed_factor > 0.0 && opts.speed_factor.is_finite()) || opts.snapshot_hz == 0 {
        return Err(ServerError::Options(
            "speed factor and snapshot rate must be positive".into(),
        ));
    }
    listener.set_nonblocking(true)?;
    sim.set_recording(false);
    let (tx, rx): (Sender<Inbound>, Receiver<Inbound>) = mpsc::channel();
    let mut clients: BTreeMap<u64, Client> = BTreeMap::new();
    let mut next_id = 0;
    let mut stats = LiveStats::default();
    let push_period = SimTime(1_000_000 / opts.snapshot_hz);
    let mut next_push = SimTime::ZERO;
    let end = opts.duration_s.map(SimTime::from_secs_f64);
    let start = Instant::now();
    while !stop.load(Ordering::Relaxed) {
        stats.clients += accept_pending(&listener, &mut next_id, &mut clients, &tx)?;
        while let Ok(inbound) = rx.try_recv() {
            match inbound {
                Inbound::Gone(id) => {
                    clients.remove(&id);
                }
                Inbound::Message(id, msg) => {
                    stats.messages += 1;
                    let Some(client) = clients.get_mut(&id) else {
                        continue;
                    };
                    let reply = respond(&mut sim, msg, &mut client.subscribed);
                    if let Some(reply) = reply {
                        if write_frame(&mut client.stream, &reply).is_err() {
                            clients.remove(&id);
                        }
                    }
                }
            }
        }
        let mut target = SimTime::from_secs_f64(start.elapsed().as_secs_f64() * opts.speed_factor);
        if let Some(end) = end {
            target = target.min(end);
        }
        let running = sim.run_until(target)?;
        if sim.now() >= next_push {
            let snapshot = sim.snapshot();
            let msg = Message::Snapshot { snapshot };
            let mut dead = vec![];
            for (id, c) in clients.iter_mut().filter(|(_, c)| c.subscribed) {
                if write_frame(&mut c.stream, &msg).is_err() {
                    dead.push(*id);
                } else {
                    stats.snapshots_pushed += 1;
                }
            }
            for id in dead {
                clients.remove(&id);
            }
            while next_push <= sim.now() {
                next_push += push_period;
            }
        }
        if !running {
            let msg = Message::error(format!("run aborted: {:?}", sim.aborted()));
            for c in clients.values_mut() {
                let _ = write_frame(&mut c.stream, &msg);
            }
            break;
        }
        if end.is_some_and(|end| sim.now() >= end) {
            break;
        }
        thread::sleep(opts.step);
    }
    stats.sim_time = sim.now();
    for c in clients.values() {
        let _ = c.stream.shutdown(std::net::Shutdown::Both);
    }
    Ok(stats)
}

fn serve_replay_client(
    mut stream: TcpStream,
    snapshots: &[WorldSnapshot],
    speed: f64,
) -> Result<(), WireError> {
    stream.set_nodelay(true)?;
    stream.set_write_timeout(Some(WRITE_TIMEOUT))?;
    let mut reader = stream.try_clone()?;
    loop {
        let reply = match read_frame(&mut reader) {
            Ok(Message::Hello { .. }) => Message::hello(SERVER_NAME),
            Ok(Message::SnapshotRequest { subscribe: false }) => Message::Snapshot {
                snapshot: snapshots[0].clone(),
            },
            Ok(Message::SnapshotRequest { subscribe: true }) => {
                let mut pacer = WallClockPacer::new();
                let sent = replay(snapshots, speed, &mut pacer, |s| {
                    write_frame(
                        &mut stream,
                        &Message::Snapshot {
                            snapshot: s.clone(),
                        },
                    )
                });
                return match sent {
                    Ok(r) => r.map(|_| ()),
                    Err(e) => write_frame(&mut stream, &Message::error(e)),
                };
            }
            Ok(_) => Message::error("replay is read-only"),
            Err(WireError::Json(e)) => Message::error(format!("malformed message: {e}")),
            Err(e) => return Err(e),
        };
        write_frame(&mut stream, &reply)?;
    }
}

/// Serves archived snapshots. Each client that subscribes receives the
/// whole stream paced at `speed`, after which its connection closes.
/// Returns the number of finished clients once `stop` is set or
/// `max_clients` have finished.
pub fn serve_replay(
    listener: TcpListener,
    snapshots: Vec<WorldSnapshot>,
    speed: f64,
    max_clients: Option<usize>,
    stop: &AtomicBool,
) -> Result<usize, ServerError> {
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(TelemetryError::SpeedFactor(speed).into());
    }
    crate::telemetry::validate_replay(&snapshots)?;
    listener.set_nonblocking(true)?;
    let snapshots = Arc::new(snapshots);
    let mut handles = Vec::new();
    let mut finished = 0;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let snaps = Arc::clone(&snapshots);
                handles.push(thread::spawn(move || {
                    serve_replay_client(stream, &snaps, speed)
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(IDLE_POLL),
            Err(e) => return Err(e.into()),
        }
        let (done, pending): (Vec<_>, Vec<_>) = handles.into_iter().partition(|h| h.is_finished());
        handles = pending;
        finished += done.len();
        for h in done {
            let _ = h.join();
        }
        if max_clients.is_some_and(|m| finished >= m) {
            break;
        }
    }
    Ok(finished)
}
