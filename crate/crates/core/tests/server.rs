//! Live and replay servers over real TCP sockets.

use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use twinbed_core::config::TwinConfig;
use twinbed_core::modes::{
    CommandSource, ControlMode, ModeAssignment, ResolvedMode, VehicleCommand,
};
use twinbed_core::scenario::{run_experiment, Simulation};
use twinbed_core::server::{serve_live, serve_replay, LiveOptions};
use twinbed_core::wire::{read_frame, write_frame, Message, PROTOCOL_VERSION};
use twinbed_core::world::VehicleId;

fn connect(listener: &TcpListener) -> TcpStream {
    let s = TcpStream::connect(listener.local_addr().unwrap()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    s
}

fn ask(s: &mut TcpStream, m: Message) -> Message {
    write_frame(s, &m).unwrap();
    read_frame(s).unwrap()
}

/// Reads until a message other than a pushed snapshot arrives.
fn reply(s: &mut TcpStream, m: Message) -> Message {
    write_frame(s, &m).unwrap();
    loop {
        match read_frame(s).unwrap() {
            Message::Snapshot { .. } => continue,
            other => return other,
        }
    }
}

#[test]
fn live_session_over_tcp() {
    let mut cfg = TwinConfig::default();
    cfg.scenario.duration_s = 600.0;
    let sim = Simulation::new(&cfg).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr_listener = listener.try_clone().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let opts = LiveOptions {
        speed_factor: 5.0,
        ..LiveOptions::default()
    };
    let server = {
        let stop = Arc::clone(&stop);
        thread::spawn(move || serve_live(listener, sim, &opts, &stop))
    };

    let mut c = connect(&addr_listener);
    assert!(matches!(
        ask(&mut c, Message::hello("test")),
        Message::Hello {
            protocol: PROTOCOL_VERSION,
            ..
        }
    ));
    thread::sleep(Duration::from_millis(300));
    let Message::Snapshot { snapshot } = ask(&mut c, Message::SnapshotRequest { subscribe: false })
    else {
        panic!("expected a snapshot");
    };
    assert!(snapshot.time.as_secs_f64() > 0.0);

    let assign = Message::AssignMode {
        assignment: ModeAssignment {
            vehicle_id: VehicleId(3),
            mode: ControlMode::Node { node_id: 4 },
        },
    };
    match reply(&mut c, assign) {
        Message::Ack {
            mode:
                Some(ResolvedMode::Follow {
                    node_id: Some(4),
                    waypoints,
                    ..
                }),
        } => assert!(waypoints.len() >= 2),
        other => panic!("unexpected reply {other:?}"),
    }
    let bad = Message::AssignMode {
        assignment: ModeAssignment {
            vehicle_id: VehicleId(99),
            mode: ControlMode::Restore,
        },
    };
    assert!(matches!(reply(&mut c, bad), Message::Error { .. }));

    let cmd = Message::Command {
        command: VehicleCommand {
            vehicle_id: VehicleId(2),
            speed_mps: 0.1,
            steer_rad: Some(0.0),
            source: CommandSource::Platoon,
        },
    };
    assert!(matches!(reply(&mut c, cmd), Message::Ack { mode: None }));

    // Subscribed clients receive a stream with increasing times.
    write_frame(&mut c, &Message::SnapshotRequest { subscribe: true }).unwrap();
    let mut times = vec![];
    while times.len() < 5 {
        if let Message::Snapshot { snapshot } = read_frame(&mut c).unwrap() {
            times.push(snapshot.time);
        }
    }
    assert!(times.windows(2).all(|w| w[0] < w[1]));

    stop.store(true, Ordering::Relaxed);
    let stats = server.join().unwrap().unwrap();
    assert_eq!(stats.clients, 1);
    assert!(stats.messages >= 6);
    assert!(stats.snapshots_pushed >= 4);
}

#[test]
fn replay_streams_archived_snapshots() {
    let mut cfg = TwinConfig::default();
    cfg.scenario.duration_s = 3.0;
    let snapshots = run_experiment(&cfg).unwrap().snapshots;
    let expected = snapshots.clone();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr_listener = listener.try_clone().unwrap();
    let server = thread::spawn(move || {
        serve_replay(listener, snapshots, 50.0, Some(1), &AtomicBool::new(false))
    });

    let mut c = connect(&addr_listener);
    assert!(matches!(
        ask(&mut c, Message::hello("viewer")),
        Message::Hello { .. }
    ));
    assert!(matches!(
        ask(
            &mut c,
            Message::AssignMode {
                assignment: ModeAssignment {
                    vehicle_id: VehicleId(1),
                    mode: ControlMode::Restore
                },
            }
        ),
        Message::Error { .. }
    ));
    write_frame(&mut c, &Message::SnapshotRequest { subscribe: true }).unwrap();
    let mut got = vec![];
    while let Ok(m) = read_frame(&mut c) {
        let Message::Snapshot { snapshot } = m else {
            panic!("unexpected {m:?}")
        };
        got.push(snapshot);
    }
    assert_eq!(got, expected);
    assert_eq!(server.join().unwrap().unwrap(), 1);
}
