//! Client wire protocol: JSON messages framed by a 4-byte big-endian
//! length prefix.

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emulator::PoseObservation;
use crate::hub::MAX_PAYLOAD_BYTES;
use crate::modes::{ModeAssignment, ResolvedMode, VehicleCommand};
use crate::world::WorldSnapshot;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection closed")]
    Closed,
    #[error("frame of {0} bytes exceeds the {MAX_PAYLOAD_BYTES} byte limit")]
    TooLarge(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed message: {0}")]
    Json(#[from] serde_json::Error),
}

/// Every message a client or server can send.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// First message of a session, from either side.
    Hello {
        #[serde(default = "default_version")]
        protocol: u32,
        #[serde(default)]
        name: String,
    },
    /// External localization fix for a physical vehicle.
    Observe {
        observation: PoseObservation,
    },
    Command {
        command: VehicleCommand,
    },
    AssignMode {
        assignment: ModeAssignment,
    },
    /// One snapshot now; with `subscribe`, a stream of snapshots.
    SnapshotRequest {
        #[serde(default)]
        subscribe: bool,
    },
    Snapshot {
        snapshot: WorldSnapshot,
    },
    /// Success reply. Mode assignments echo the resolved mode.
    Ack {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<ResolvedMode>,
    },
    Error {
        message: String,
    },
}

fn default_version() -> u32 {
    PROTOCOL_VERSION
}

impl Message {
    pub fn hello(name: &str) -> Self {
        Message::Hello {
            protocol: PROTOCOL_VERSION,
            name: name.into(),
        }
    }

    pub fn error(message: impl ToString) -> Self {
        Message::Error {
            message: message.to_string(),
        }
    }
}

/// Serializes `msg` and writes it as one frame.
pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_PAYLOAD_BYTES {
        return Err(WireError::TooLarge(body.len()));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean end of stream before the length prefix is
/// [`WireError::Closed`].
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Err(WireError::Closed),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_PAYLOAD_BYTES {
        return Err(WireError::TooLarge(n));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Ok(serde_json::from_slice(&body)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimTime;
    use crate::modes::{CommandSource, ControlMode};
    use crate::world::VehicleId;

    fn all_kinds() -> Vec<Message> {
        vec![
            Message::hello("ui"),
            Message::Observe {
                observation: PoseObservation {
                    vehicle_id: VehicleId(1),
                    x_m: 1.0,
                    y_m: 2.0,
                    heading_rad: 0.5,
                    capture_time: SimTime(10),
                    emit_time: SimTime(20),
                    out_of_bounds: false,
                },
            },
            Message::Command {
                command: VehicleCommand {
                    vehicle_id: VehicleId(2),
                    speed_mps: 0.2,
                    steer_rad: Some(0.1),
                    source: CommandSource::External,
                },
            },
            Message::AssignMode {
                assignment: ModeAssignment {
                    vehicle_id: VehicleId(3),
                    mode: ControlMode::Node { node_id: 5 },
                },
            },
            Message::SnapshotRequest { subscribe: true },
            Message::Snapshot {
                snapshot: WorldSnapshot {
                    seq: 1,
                    time: SimTime(5),
                    vehicles: vec![],
                },
            },
            Message::Ack { mode: None },
            Message::error("nope"),
        ]
    }

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        for m in all_kinds() {
            write_frame(&mut buf, &m).unwrap();
        }
        let mut r = buf.as_slice();
        for m in all_kinds() {
            assert_eq!(read_frame(&mut r).unwrap(), m);
        }
        assert!(matches!(read_frame(&mut r), Err(WireError::Closed)));
    }

    #[test]
    fn prefix_is_big_endian_length() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Message::SnapshotRequest { subscribe: false }).unwrap();
        let n = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        assert_eq!(n, buf.len() - 4);
        let v: serde_json::Value = serde_json::from_slice(&buf[4..]).unwrap();
        assert_eq!(v["type"], "snapshot_request");
    }

    #[test]
    fn accepts_minimal_client_json() {
        let body =
            br#"{"type":"assign_mode","assignment":{"vehicle_id":4,"mode":"node","node_id":2}}"#;
        let mut buf = (body.len() as u32).to_be_bytes().to_vec();
        buf.extend_from_slice(body);
        let m = read_frame(&mut buf.as_slice()).unwrap();
        assert!(matches!(m, Message::AssignMode { .. }));
        let hello = br#"{"type":"hello"}"#;
        let mut buf = (hello.len() as u32).to_be_bytes().to_vec();
        buf.extend_from_slice(hello);
        assert_eq!(
            read_frame(&mut buf.as_slice()).unwrap(),
            Message::Hello {
                protocol: PROTOCOL_VERSION,
                name: String::new()
            }
        );
    }

    #[test]
    fn rejects_oversized_and_truncated_frames() {
        let huge = ((MAX_PAYLOAD_BYTES + 1) as u32).to_be_bytes();
        assert!(matches!(
            read_frame(&mut huge.as_slice()),
            Err(WireError::TooLarge(_))
        ));
        let mut buf = Vec::new();
        write_frame(&mut buf, &Message::hello("x")).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(
            read_frame(&mut buf.as_slice()),
            Err(WireError::Io(_))
        ));
        let garbage = [0u8, 0, 0, 3, b'{', b'x', b'}'];
        assert!(matches!(
            read_frame(&mut garbage.as_slice()),
            Err(WireError::Json(_))
        ));
    }
}
