//! Control access modes and the per-vehicle controller that executes them.
//!
//! External programs drive a vehicle in one of three ways: direct
//! speed/steer values, a sequence of equidistant waypoints, or a calibrated
//! node of the road network. The hub validates an assignment and resolves
//! node targets into waypoints; the vehicle's owner (workstation for
//! physical vehicles, cyber space for cloud vehicles) swaps it in at the
//! next control tick.

use serde::{Deserialize, Serialize};

use crate::control::{waypoint_follow, ControlError, WaypointConfig, WaypointTrack};
use crate::track::Point;
use crate::world::VehicleId;
use crate::{VehicleParams, VehicleState};

/// Mode requested by an external program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ControlMode {
    Direct {
        speed_mps: f64,
        steer_rad: f64,
    },
    Waypoints {
        waypoints: Vec<Point<f64>>,
        /// Treat the sequence as a closed loop (never completes).
        #[serde(default)]
        looped: bool,
        #[serde(default)]
        cruise_speed_mps: Option<f64>,
    },
    Node {
        node_id: u32,
    },
    /// Return to the mode that was active before the current one.
    Restore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAssignment {
    pub vehicle_id: VehicleId,
    #[serde(flatten)]
    pub mode: ControlMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Direct,
    Waypoints,
    Node,
}

/// Mode after hub validation; node targets are already expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ResolvedMode {
    Direct {
        speed_mps: f64,
        steer_rad: f64,
    },
    Follow {
        waypoints: Vec<Point<f64>>,
        looped: bool,
        cruise_speed_mps: Option<f64>,
        /// Set when the waypoints were resolved from a node target.
        node_id: Option<u32>,
    },
    Restore,
}

impl ResolvedMode {
    pub fn kind(&self) -> Option<ModeKind> {
        match self {
            ResolvedMode::Direct { .. } => Some(ModeKind::Direct),
            ResolvedMode::Follow { node_id: None, .. } => Some(ModeKind::Waypoints),
            ResolvedMode::Follow {
                node_id: Some(_), ..
            } => Some(ModeKind::Node),
            ResolvedMode::Restore => None,
        }
    }
}

/// Who issued a speed/steer command. Automated set-points never override a
/// vehicle under direct control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandSource {
    External,
    Platoon,
}

/// Speed (and optionally steering) command addressed to one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleCommand {
    pub vehicle_id: VehicleId,
    pub speed_mps: f64,
    /// `None` means a speed set-point for a path-following vehicle.
    #[serde(default)]
    pub steer_rad: Option<f64>,
    pub source: CommandSource,
}

#[derive(Debug, Clone, PartialEq)]
enum Active {
    Direct {
        speed_mps: f64,
        steer_rad: f64,
    },
    Follow {
        track: WaypointTrack<f64>,
        cruise_speed_mps: Option<f64>,
        node_id: Option<u32>,
        complete: bool,
    },
}

impl Active {
    fn kind(&self) -> ModeKind {
        match self {
            Active::Direct { .. } => ModeKind::Direct,
            Active::Follow { node_id: None, .. } => ModeKind::Waypoints,
            Active::Follow {
                node_id: Some(_), ..
            } => ModeKind::Node,
        }
    }

    fn from_resolved(mode: ResolvedMode) -> Result<Option<Self>, ControlError> {
        Ok(match mode {
            ResolvedMode::Direct {
                speed_mps,
                steer_rad,
            } => Some(Active::Direct {
                speed_mps,
                steer_rad,
            }),
            ResolvedMode::Follow {
                waypoints,
                looped,
                cruise_speed_mps,
                node_id,
            } => Some(Active::Follow {
                track: WaypointTrack::new(waypoints, looped)?,
                cruise_speed_mps,
                node_id,
                complete: false,
            }),
            ResolvedMode::Restore => None,
        })
    }
}

enum Pending {
    Replace(Active),
    Restore,
}

/// Executes exactly one active mode for a vehicle.
pub struct VehicleController {
    active: Active,
    pending: Option<Pending>,
    previous: Option<Active>,
    setpoint_mps: Option<f64>,
    pub cfg: WaypointConfig<f64>,
}

/// Output of one control evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeOutput {
    pub speed_mps: f64,
    pub steer_rad: f64,
    pub complete: bool,
}

impl VehicleController {
    /// Starts in direct mode with a zero command.
    pub fn new(cfg: WaypointConfig<f64>) -> Self {
        Self {
            active: Active::Direct {
                speed_mps: 0.0,
                steer_rad: 0.0,
            },
            pending: None,
            previous: None,
            setpoint_mps: None,
            cfg,
        }
    }

    pub fn mode_kind(&self) -> ModeKind {
        self.active.kind()
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.active, Active::Follow { complete: true, .. })
    }

    /// Queues a mode; takes effect at the next [`apply_pending`](Self::apply_pending).
    pub fn schedule(&mut self, mode: ResolvedMode) -> Result<(), ControlError> {
        self.pending = Some(match Active::from_resolved(mode)? {
            Some(a) => Pending::Replace(a),
            None => Pending::Restore,
        });
        Ok(())
    }

    /// Swaps in the queued mode, if any. Returns true when the mode changed.
    pub fn apply_pending(&mut self) -> bool {
        match self.pending.take() {
            Some(Pending::Replace(next)) => {
                let prev = std::mem::replace(&mut self.active, next);
                self.previous = Some(prev);
                self.setpoint_mps = None;
                true
            }
            Some(Pending::Restore) => match self.previous.take() {
                Some(prev) => {
                    self.active = prev;
                    self.setpoint_mps = None;
                    true
                }
                None => false,
            },
            None => false,
        }
    }

    /// Applies a command. Returns false when the command does not fit the
    /// active mode and was ignored.
    pub fn command(&mut self, cmd: &VehicleCommand) -> bool {
        match (&mut self.active, cmd.steer_rad) {
            (
                Active::Direct {
                    speed_mps,
                    steer_rad,
                },
                Some(steer),
            ) if cmd.source == CommandSource::External => {
                *speed_mps = cmd.speed_mps;
                *steer_rad = steer;
                true
            }
            (Active::Follow { .. }, None) => {
                self.setpoint_mps = Some(cmd.speed_mps);
                true
            }
            _ => false,
        }
    }

    /// Evaluates the active mode. Path-following modes need a pose;
    /// `Ok(None)` means no pose is available yet.
    pub fn evaluate(
        &mut self,
        pose: Option<&VehicleState>,
        params: &VehicleParams,
    ) -> Result<Option<ModeOutput>, ControlError> {
        match &mut self.active {
            Active::Direct {
                speed_mps,
                steer_rad,
            } => Ok(Some(ModeOutput {
                speed_mps: *speed_mps,
                steer_rad: *steer_rad,
                complete: false,
            })),
            Active::Follow {
                track,
                cruise_speed_mps,
                complete,
                ..
            } => {
                if *complete {
                    return Ok(Some(ModeOutput {
                        speed_mps: 0.0,
                        steer_rad: 0.0,
                        complete: true,
                    }));
                }
                let Some(pose) = pose else {
                    return Ok(None);
                };
                let mut cfg = self.cfg;
                if let Some(c) = self.setpoint_mps.or(*cruise_speed_mps) {
                    cfg.cruise_speed_mps = c;
                }
                if self.setpoint_mps.is_some() {
                    // An external set-point owns the longitudinal loop.
                    cfg.curvature_slowdown_m = 0.0;
                }
                let out = waypoint_follow(pose, track, &cfg, params)?;
                *complete = out.complete;
                Ok(Some(ModeOutput {
                    speed_mps: out.speed_mps,
                    steer_rad: out.steer_rad,
                    complete: out.complete,
                }))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Vec<Point<f64>> {
        (0..20).map(|k| Point::new(0.0, k as f64 * 0.1)).collect()
    }

    fn ext(speed: f64, steer: Option<f64>) -> VehicleCommand {
        VehicleCommand {
            vehicle_id: VehicleId(1),
            speed_mps: speed,
            steer_rad: steer,
            source: CommandSource::External,
        }
    }

    #[test]
    fn switch_happens_at_apply() {
        let mut c = VehicleController::new(WaypointConfig::default());
        c.schedule(ResolvedMode::Direct {
            speed_mps: 0.2,
            steer_rad: 0.0,
        })
        .unwrap();
        let p = VehicleParams::default();
        assert_eq!(c.evaluate(None, &p).unwrap().unwrap().speed_mps, 0.0);
        assert!(c.apply_pending());
        assert_eq!(c.evaluate(None, &p).unwrap().unwrap().speed_mps, 0.2);
    }

    #[test]
    fn restore_returns_previous_mode() {
        let mut c = VehicleController::new(WaypointConfig::default());
        c.schedule(ResolvedMode::Follow {
            waypoints: line(),
            looped: false,
            cruise_speed_mps: None,
            node_id: None,
        })
        .unwrap();
        c.apply_pending();
        assert_eq!(c.mode_kind(), ModeKind::Waypoints);
        c.schedule(ResolvedMode::Direct {
            speed_mps: 1.0,
            steer_rad: 0.0,
        })
        .unwrap();
        c.apply_pending();
        assert_eq!(c.mode_kind(), ModeKind::Direct);
        c.schedule(ResolvedMode::Restore).unwrap();
        c.apply_pending();
        assert_eq!(c.mode_kind(), ModeKind::Waypoints);
    }

    #[test]
    fn commands_respect_mode() {
        let mut c = VehicleController::new(WaypointConfig::default());
        assert!(c.command(&ext(0.3, Some(0.1))));
        let mut platoon = ext(0.3, Some(0.1));
        platoon.source = CommandSource::Platoon;
        assert!(!c.command(&platoon));
        assert!(!c.command(&ext(0.3, None)));

        c.schedule(ResolvedMode::Follow {
            waypoints: line(),
            looped: false,
            cruise_speed_mps: None,
            node_id: None,
        })
        .unwrap();
        c.apply_pending();
        assert!(c.command(&ext(0.15, None)));
        let pose = VehicleState::at(0.0, 0.0, 0.0, 0.0);
        let out = c
            .evaluate(Some(&pose), &VehicleParams::default())
            .unwrap()
            .unwrap();
        assert_eq!(out.speed_mps, 0.15);
        assert_eq!(c.evaluate(None, &VehicleParams::default()).unwrap(), None);
    }

    #[test]
    fn assignment_json_shape() {
        let a = ModeAssignment {
            vehicle_id: VehicleId(3),
            mode: ControlMode::Node { node_id: 7 },
        };
        let j = serde_json::to_value(&a).unwrap();
        assert_eq!(
            j,
            serde_json::json!({"vehicle_id": 3, "mode": "node", "node_id": 7})
        );
        let back: ModeAssignment = serde_json::from_value(j).unwrap();
        assert_eq!(back, a);
    }
}
