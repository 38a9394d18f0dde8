//! A running simulation: plant, controller and the command vocabulary shared
//! by scenario scripts and the teleop protocol.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlConfig, ControlOutput, Controller};
use crate::error::{ControlError, ModeError, SimError};
use crate::geometry::{build_jacobian, Vec3};
use crate::leg::{LegMode, ManipTarget, ToolPhase};
use crate::modes::{RequestSource, SystemMode, TransitionRequest};
use crate::sim::{
    attach_wire, detach_wire, release_payload, step, PayloadSpec, PayloadState, RobotParams,
    SimParams, SimState, StepReport, WorldModel,
};
use crate::tension::{gravity_wrench, solve_tension_qp};
use crate::wire_control::WireMode;

/// Operator or scenario input. Wire numbers are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    /// CoG twist target (world frame) and/or wheel-driving command.
    SetVelocity {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        linear: Option<Vec3>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        angular: Option<Vec3>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        forward: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        yaw_rate: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base_pitch: Option<f64>,
    },
    /// Wire rate targets, m/s, positionally for wires 1, 2, ...
    SetWireRates {
        rates: Vec<f64>,
    },
    /// Missing fields keep the current mode component.
    Transition {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wire_mode: Option<WireMode>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        leg_mode: Option<LegMode>,
    },
    ToolPhase {
        phase: ToolPhase,
    },
    AttachWire {
        wire: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anchor: Option<Vec3>,
        /// Index into the world's anchor list, used when `anchor` is absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anchor_index: Option<usize>,
    },
    DetachWire {
        wire: usize,
    },
    /// Grasp target for the manipulation controller; `null` clears it.
    ManipTarget {
        target: Option<ManipTarget>,
    },
    /// 1-based payload number.
    ReleasePayload {
        payload: usize,
    },
    RetainTool {
        retained: bool,
    },
    SpawnPayload(PayloadSpec),
}

impl Command {
    /// The five command types the teleop protocol accepts.
    pub fn is_protocol_command(&self) -> bool {
        matches!(
            self,
            Command::SetVelocity { .. }
                | Command::SetWireRates { .. }
                | Command::Transition { .. }
                | Command::ToolPhase { .. }
                | Command::AttachWire { .. }
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Command::SetVelocity { .. } => "set_velocity",
            Command::SetWireRates { .. } => "set_wire_rates",
            Command::Transition { .. } => "transition",
            Command::ToolPhase { .. } => "tool_phase",
            Command::AttachWire { .. } => "attach_wire",
            Command::DetachWire { .. } => "detach_wire",
            Command::ManipTarget { .. } => "manip_target",
            Command::ReleasePayload { .. } => "release_payload",
            Command::RetainTool { .. } => "retain_tool",
            Command::SpawnPayload(_) => "spawn_payload",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommandError {
    #[error(transparent)]
    Rejected(#[from] ModeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid command: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Plant and solver parameters for a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimParams,
    pub robot: RobotParams,
    pub control: ControlConfig,
    /// Log row spacing, s.
    pub log_period: f64,
}

impl RunConfig {
    pub fn with_defaults() -> Self {
        Self {
            log_period: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.sim.validate().map_err(|e| e.to_string())?;
        self.robot.validate()?;
        self.control.decimation(self.sim.dt)?;
        if !(self.log_period > 0.0) {
            return Err("log_period must be positive".into());
        }
        Ok(())
    }
}

pub struct Session {
    pub state: SimState,
    pub world: WorldModel,
    pub config: RunConfig,
    pub controller: Controller,
    decimation: usize,
    steps: u64,
    output: ControlOutput,
    report: StepReport,
}

impl Session {
    pub fn new(
        config: RunConfig,
        world: WorldModel,
        state: SimState,
        mode: SystemMode,
    ) -> Result<Self, SessionError> {
        config.validate().map_err(SessionError::Config)?;
        world.validate().map_err(SessionError::Config)?;
        if !mode.is_valid() {
            return Err(SessionError::Config(format!(
                "initial mode {} is not allowed",
                mode.label()
            )));
        }
        let decimation = config
            .control
            .decimation(config.sim.dt)
            .map_err(SessionError::Config)?;
        let mut controller = Controller::new(config.control.clone(), &config.robot, mode);
        let output = controller.tick(&state, &world, &config.robot)?;
        Ok(Self {
            state,
            world,
            controller,
            decimation,
            steps: 0,
            output,
            report: StepReport::default(),
            config,
        })
    }

    pub fn time(&self) -> f64 {
        self.state.time
    }

    pub fn mode(&self) -> SystemMode {
        self.controller.mode
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn decimation(&self) -> usize {
        self.decimation
    }

    pub fn output(&self) -> &ControlOutput {
        &self.output
    }

    pub fn report(&self) -> &StepReport {
        &self.report
    }

    fn wire_index(&self, wire: usize) -> Result<usize, CommandError> {
        let n = self.config.robot.wire_count();
        if wire == 0 || wire > n {
            return Err(CommandError::Invalid(format!(
                "wire {wire} outside 1..={n}"
            )));
        }
        Ok(wire - 1)
    }

    /// Holds every attached wire at the gravity-compensating QP tension.
    pub fn pretension_wires(&mut self) -> Result<(), SessionError> {
        let attached = self.state.attached_indices();
        if attached.is_empty() {
            return Ok(());
        }
        let robot = &self.config.robot;
        let jac = build_jacobian(&self.state.body, &self.state.attached_geometry(robot))
            .map_err(SimError::from)?;
        let mass = self.state.suspended_mass(robot, &self.world);
        let sol = solve_tension_qp(
            &jac,
            &gravity_wrench(mass, &self.world.gravity),
            &robot.limits_for(&attached),
            &self.config.control.qp,
        )
        .map_err(ControlError::from)?;
        for (k, &i) in attached.iter().enumerate() {
            self.state
                .pretension(robot, &self.config.sim, i, sol.tensions[k])?;
        }
        Ok(())
    }

    /// Applies a command between control ticks. Returns the mode after it.
    pub fn apply(
        &mut self,
        cmd: &Command,
        source: RequestSource,
    ) -> Result<SystemMode, CommandError> {
        let time = self.state.time;
        let sp = &mut self.controller.setpoints;
        match cmd {
            Command::SetVelocity {
                linear,
                angular,
                forward,
                yaw_rate,
                base_pitch,
            } => {
                let vectors = [linear, angular];
                let scalars = [forward, yaw_rate, base_pitch];
                let mut all = vectors
                    .iter()
                    .flat_map(|v| v.iter().flat_map(|v| v.iter().copied()))
                    .chain(scalars.iter().filter_map(|v| **v));
                if all.any(|v| !v.is_finite()) {
                    return Err(CommandError::Invalid("non-finite velocity".into()));
                }
                if let Some(v) = linear {
                    sp.twist.fixed_rows_mut::<3>(0).copy_from(v);
                }
                if let Some(w) = angular {
                    sp.twist.fixed_rows_mut::<3>(3).copy_from(w);
                }
                if let Some(v) = forward {
                    sp.drive.forward = *v;
                }
                if let Some(v) = yaw_rate {
                    sp.drive.yaw_rate = *v;
                }
                if let Some(v) = base_pitch {
                    sp.drive.base_pitch = *v;
                }
            }
            Command::SetWireRates { rates } => {
                let n = sp.wire_rates.len();
                if rates.len() > n {
                    return Err(CommandError::Invalid(format!(
                        "{} rates for {n} wires",
                        rates.len()
                    )));
                }
                if rates.iter().any(|r| !r.is_finite()) {
                    return Err(CommandError::Invalid("non-finite wire rate".into()));
                }
                sp.wire_rates = rates.clone();
                sp.wire_rates.resize(n, 0.0);
            }
            Command::Transition {
                wire_mode,
                leg_mode,
            } => {
                let cur = self.controller.mode;
                let requested = SystemMode::new(
                    wire_mode.unwrap_or(cur.wire_mode),
                    leg_mode.unwrap_or(cur.leg_mode),
                );
                let req = TransitionRequest { requested, source };
                self.controller.request(
                    &req,
                    &self.state,
                    &self.world,
                    &self.config.robot,
                    &self.config.sim,
                )?;
                // Re-tick so the new mode acts from this instant.
                self.output = self
                    .controller
                    .tick(&self.state, &self.world, &self.config.robot)
                    .map_err(|e| {
                        CommandError::Invalid(format!("controller failed after transition: {e}"))
                    })?;
            }
            Command::ToolPhase { phase } => self.controller.set_tool_phase(*phase, time),
            Command::AttachWire {
                wire,
                anchor,
                anchor_index,
            } => {
                let i = self.wire_index(*wire)?;
                let point = match (anchor, anchor_index) {
                    (Some(p), _) => *p,
                    (None, Some(k)) => *self
                        .world
                        .anchors
                        .get(*k)
                        .ok_or_else(|| CommandError::Invalid(format!("no anchor {k}")))?,
                    (None, None) => {
                        return Err(CommandError::Invalid("attach_wire needs an anchor".into()))
                    }
                };
                attach_wire(&mut self.state, &self.config.robot, i, point)?;
            }
            Command::DetachWire { wire } => {
                let i = self.wire_index(*wire)?;
                detach_wire(&mut self.state, i)?;
            }
            Command::ManipTarget { target } => {
                if let Some(t) = target {
                    if !(t.width >= 0.0) || !t.p_target.iter().all(|v| v.is_finite()) {
                        return Err(CommandError::Invalid(
                            "manipulation target must be finite with width >= 0".into(),
                        ));
                    }
                }
                sp.manip = *target;
            }
            Command::ReleasePayload { payload } => {
                if *payload == 0 || *payload > self.state.payloads.len() {
                    return Err(CommandError::Invalid(format!("no payload {payload}")));
                }
                release_payload(&mut self.state, payload - 1);
            }
            Command::RetainTool { retained } => self.state.tool_retained = *retained,
            Command::SpawnPayload(spec) => {
                if !(spec.mass > 0.0 && spec.radius > 0.0) {
                    return Err(CommandError::Invalid(
                        "payload needs positive mass and radius".into(),
                    ));
                }
                self.world.payloads.push(spec.clone());
                self.state.payloads.push(PayloadState {
                    position: spec.position,
                    velocity: Vec3::zeros(),
                    grasped: None,
                });
            }
        }
        Ok(self.controller.mode)
    }

    /// One physics step, ticking the controller first when due.
    pub fn advance(&mut self) -> Result<(), SessionError> {
        self.tick_if_due()?;
        self.integrate()
    }

    pub fn control_due(&self) -> bool {
        self.steps.is_multiple_of(self.decimation as u64)
    }

    pub fn tick_if_due(&mut self) -> Result<(), SessionError> {
        if self.control_due() {
            self.output = self
                .controller
                .tick(&self.state, &self.world, &self.config.robot)?;
        }
        Ok(())
    }

    /// Advances the plant one step with the held actuation.
    pub fn integrate(&mut self) -> Result<(), SessionError> {
        let dt = self.config.sim.dt;
        self.report = step(
            &mut self.state,
            &self.output.actuation,
            &self.world,
            &self.config.robot,
            &self.config.sim,
            dt,
        )?;
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_json_shapes() {
        let c: Command =
            serde_json::from_str(r#"{"type":"set_velocity","linear":[0,0,0.1]}"#).unwrap();
        assert!(matches!(
            c,
            Command::SetVelocity {
                linear: Some(_),
                ..
            }
        ));
        let c: Command =
            serde_json::from_str(r#"{"type":"transition","leg_mode":"Manipulation"}"#).unwrap();
        assert!(c.is_protocol_command());
        let c: Command = serde_json::from_str(
            r#"{"type":"spawn_payload","mass":1.0,"radius":0.1,"position":[0,0,0]}"#,
        )
        .unwrap();
        assert!(!c.is_protocol_command());
        assert!(serde_json::from_str::<Command>(r#"{"type":"warp"}"#).is_err());
        assert!(
            serde_json::from_str::<Command>(r#"{"type":"tool_phase","phase":"closed","x":1}"#)
                .is_err()
        );
    }
}
