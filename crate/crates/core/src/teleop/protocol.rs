//! Newline-delimited JSON frames exchanged with teleop clients.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::modes::{SystemMode, CONTACT_THRESHOLD};
use crate::session::{Command, Session};
use crate::sim::{contact_flags, TerrainPatch};

pub const PROTOCOL: &str = "wireleg-teleop v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    /// `[w, x, y, z]`.
    pub quaternion: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireFrame {
    /// 1-based.
    pub wire: usize,
    pub attached: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec3>,
    pub length: f64,
    pub tension: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactFrame {
    pub wheel_left: bool,
    pub wheel_right: bool,
    pub knee_left: bool,
    pub knee_right: bool,
    pub body: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadFrame {
    pub position: Vec3,
    pub radius: f64,
    pub grasped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub time: f64,
    pub pose: Pose,
    pub wires: Vec<WireFrame>,
    pub mode: SystemMode,
    pub contacts: ContactFrame,
    /// `[left roll, left pitch, left knee, right roll, right pitch, right knee]`.
    pub joints: [f64; 6],
    pub payloads: Vec<PayloadFrame>,
    /// Commands applied so far, and the sim time of the latest one.
    pub commands_applied: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_command_time: Option<f64>,
}

/// Static scene description sent once on connect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelloFrame {
    pub protocol: String,
    pub scenario: String,
    pub control_rate: f64,
    pub state_rate: f64,
    pub half_extent: f64,
    pub f_max: Vec<f64>,
    pub anchors: Vec<Vec3>,
    pub terrain: Vec<TerrainPatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Hello(HelloFrame),
    State(StateFrame),
    Error {
        message: String,
    },
    TransitionResult {
        ok: bool,
        mode: SystemMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl ServerFrame {
    /// One line of NDJSON, newline included.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frame serializes");
        s.push('\n');
        s
    }
}

/// Parses one client line. Only the protocol command types are accepted.
pub fn parse_command(line: &str) -> Result<Command, String> {
    let cmd: Command =
        serde_json::from_str(line.trim()).map_err(|e| format!("malformed command: {e}"))?;
    if !cmd.is_protocol_command() {
        return Err(format!(
            "command type {} is not accepted over teleop",
            cmd.kind()
        ));
    }
    Ok(cmd)
}

pub fn hello_frame(session: &Session, scenario: &str, state_rate: f64) -> HelloFrame {
    let robot = &session.config.robot;
    HelloFrame {
        protocol: PROTOCOL.to_string(),
        scenario: scenario.to_string(),
        control_rate: session.config.control.control_rate,
        state_rate,
        half_extent: robot.half_extent,
        f_max: robot.f_max.clone(),
        anchors: session.world.anchors.clone(),
        terrain: session.world.terrain.clone(),
    }
}

pub fn state_frame(
    session: &Session,
    commands_applied: u64,
    last_command_time: Option<f64>,
) -> StateFrame {
    let s = &session.state;
    let q = s.body.orientation.quaternion();
    let flags = contact_flags(
        s,
        &session.world,
        &session.config.robot,
        &session.config.sim,
    );
    let on = |f: f64| f > CONTACT_THRESHOLD;
    StateFrame {
        time: s.time,
        pose: Pose {
            position: s.body.position,
            quaternion: [q.w, q.i, q.j, q.k],
        },
        wires: s
            .wires
            .iter()
            .enumerate()
            .map(|(i, w)| WireFrame {
                wire: i + 1,
                attached: w.attached,
                anchor: w.attached.then_some(w.anchor),
                length: w.length,
                tension: w.tension,
            })
            .collect(),
        mode: session.mode(),
        contacts: ContactFrame {
            wheel_left: on(flags.wheel_left),
            wheel_right: on(flags.wheel_right),
            knee_left: on(flags.knee_left),
            knee_right: on(flags.knee_right),
            body: on(flags.body),
        },
        joints: s.legs.pose.to_array(),
        payloads: s
            .payloads
            .iter()
            .zip(&session.world.payloads)
            .map(|(p, spec)| PayloadFrame {
                position: match &p.grasped {
                    Some(r) => s.body.point_to_world(r),
                    None => p.position,
                },
                radius: spec.radius,
                grasped: p.grasped.is_some(),
            })
            .collect(),
        commands_applied,
        last_command_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_protocol_commands_pass() {
        assert!(parse_command(r#"{"type":"set_velocity","linear":[0,0,0.1]}"#).is_ok());
        assert!(parse_command(r#"{"type":"attach_wire","wire":1,"anchor":[0,0,3]}"#).is_ok());
        assert!(parse_command(r#"{"type":"detach_wire","wire":1}"#).is_err());
        assert!(parse_command("{not json").is_err());
        assert!(parse_command(r#"{"type":"set_wire_rates","rates":"fast"}"#).is_err());
    }

    #[test]
    fn frames_are_tagged() {
        let f = ServerFrame::Error {
            message: "x".into(),
        };
        let line = f.to_line();
        assert!(line.ends_with('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["type"], "error");
        let t = ServerFrame::TransitionResult {
            ok: false,
            mode: SystemMode::default(),
            reason: Some("no".into()),
        };
        let v: serde_json::Value = serde_json::from_str(&t.to_line()).unwrap();
        assert_eq!(v["type"], "transition_result");
        assert_eq!(v["mode"]["wire_mode"], "Free");
    }
}
