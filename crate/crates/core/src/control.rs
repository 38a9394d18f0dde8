//! Fixed-rate control loop: runs the active wire and leg controllers, the
//! mode machine and any posture script, and produces plant actuation.

use nalgebra::{DVector, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{ControlError, LegError, ModeError};
use crate::geometry::{build_jacobian, wire_rates, Twist, Vec3};
use crate::leg::{
    drive_wheel_speeds, manip_ik, tool_phase_targets, LegMode, LegPose, ManipTarget, ToolPhase,
};
use crate::modes::{
    posture_sequence, request_transition, GuardContext, PostureConfig, PostureScript,
    PostureSegment, SystemMode, TransitionRequest,
};
use crate::sim::{
    contact_flags, Actuation, RobotParams, SimParams, SimState, WinchParams, WorldModel,
};
use crate::tension::{gravity_wrench, solve_tension_qp, QpOptions};
use crate::wire_control::{
    cog_velocity_tensions, tension_to_current, wire_velocity_tensions, ControllerGains, WinchModel,
    WireMode,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    /// Controller tick rate, Hz.
    pub control_rate: f64,
    pub gains: ControllerGains,
    pub qp: QpOptions,
    /// Residual force (N) below which the gravity wrench counts as feasible.
    pub feasibility_tol: f64,
    /// Winch model the controller believes in; defaults to the plant's.
    pub winch: Option<WinchParams>,
    pub posture: PostureConfig,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            control_rate: 200.0,
            gains: ControllerGains::default(),
            qp: QpOptions::default(),
            feasibility_tol: 1e-3,
            winch: None,
            posture: PostureConfig::default(),
        }
    }
}

impl ControlConfig {
    /// Physics steps per control tick.
    pub fn decimation(&self, dt: f64) -> Result<usize, String> {
        if !(self.control_rate > 0.0) {
            return Err("control_rate must be positive".into());
        }
        let n = (1.0 / (self.control_rate * dt)).round();
        if n < 1.0 {
            return Err(format!(
                "control_rate {} Hz exceeds the physics rate",
                self.control_rate
            ));
        }
        Ok(n as usize)
    }
}

/// Wheel-driving command in the body frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriveCommand {
    /// Forward speed, m/s.
    pub forward: f64,
    pub yaw_rate: f64,
    /// Offset added to the vehicle-posture hip pitch, rad.
    pub base_pitch: f64,
}

/// Current operator or scenario targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Setpoints {
    /// CoG twist target `q̇ref`, world frame.
    pub twist: Twist,
    /// Wire rate targets `l̇ref`, indexed by wire.
    pub wire_rates: Vec<f64>,
    pub drive: DriveCommand,
    pub manip: Option<ManipTarget>,
    pub tool_phase: ToolPhase,
    /// Time the current tool phase was selected.
    pub tool_since: f64,
}

impl Setpoints {
    pub fn new(wires: usize) -> Self {
        Self {
            twist: Twist::zeros(),
            wire_rates: vec![0.0; wires],
            drive: DriveCommand::default(),
            manip: None,
            tool_phase: ToolPhase::Open,
            tool_since: f64::NEG_INFINITY,
        }
    }
}

/// Everything computed in one tick, for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlOutput {
    pub actuation: Actuation,
    /// Commanded tensions by wire (zero when detached or free).
    pub tension_ref: Vec<f64>,
    /// Wire rate targets by wire.
    pub rate_ref: Vec<f64>,
    /// Twist the wire controller tracks, including posture reorientation.
    pub twist_ref: Twist,
    pub qp_converged: bool,
    pub leg_error: Option<LegError>,
}

#[derive(Clone, Debug, PartialEq)]
struct ActiveScript {
    script: PostureScript,
    start: f64,
    /// Angular rate for the current reorientation segment, fixed on entry.
    reorient: Option<(usize, Vec3)>,
    held: LegPose,
}

#[derive(Clone, Debug)]
pub struct Controller {
    pub config: ControlConfig,
    pub mode: SystemMode,
    pub setpoints: Setpoints,
    script: Option<ActiveScript>,
    winch: WinchModel,
    last: Option<ControlOutput>,
}

/// Minimal rotation taking the body x axis to the direction given by
/// `pitch` at the current heading.
fn reorientation_rate(orientation: &UnitQuaternion<f64>, pitch: f64, duration: f64) -> Vec3 {
    let x = orientation * Vec3::x();
    let mut heading = Vec3::new(x.x, x.y, 0.0);
    if heading.norm() < 1e-3 {
        let down = orientation * -Vec3::z();
        heading = Vec3::new(down.x, down.y, 0.0);
    }
    if heading.norm() < 1e-9 {
        heading = Vec3::x();
    }
    let heading = heading.normalize();
    let target = heading * pitch.cos() + Vec3::z() * (-pitch.sin());
    let rot = Rotation3::rotation_between(&x, &target).unwrap_or_else(Rotation3::identity);
    if duration > 0.0 {
        rot.scaled_axis() / duration
    } else {
        Vec3::zeros()
    }
}

impl Controller {
    pub fn new(config: ControlConfig, robot: &RobotParams, mode: SystemMode) -> Self {
        let winch = config.winch.as_ref().unwrap_or(&robot.winch).model();
        Self {
            config,
            mode,
            setpoints: Setpoints::new(robot.wire_count()),
            script: None,
            winch,
            last: None,
        }
    }

    pub fn last_output(&self) -> Option<&ControlOutput> {
        self.last.as_ref()
    }

    pub fn posture_active(&self) -> bool {
        self.script.is_some()
    }

    /// Runs the guards against the current plant state and, on success,
    /// switches mode and starts the posture script.
    pub fn request(
        &mut self,
        req: &TransitionRequest,
        state: &SimState,
        world: &WorldModel,
        robot: &RobotParams,
        params: &SimParams,
    ) -> Result<SystemMode, ModeError> {
        let attached = state.attached_indices();
        let wires = state.attached_geometry(robot);
        let limits = robot.limits_for(&attached);
        let flags = contact_flags(state, world, robot, params);
        let ctx = GuardContext {
            body: &state.body,
            wires: &wires,
            contact_forces: &flags.wheel_forces(),
            mass: state.suspended_mass(robot, world),
            gravity: world.gravity,
            limits: &limits,
            feasibility_tol: self.config.feasibility_tol,
        };
        let next = request_transition(self.mode, req, &ctx)?;
        if next != self.mode {
            let script = posture_sequence(
                self.mode,
                next,
                &state.legs.pose,
                &robot.legs,
                &robot.tool,
                &self.config.posture,
            );
            self.script = (!script.is_empty()).then(|| ActiveScript {
                script,
                start: state.time,
                reorient: None,
                held: state.legs.pose,
            });
            if next.leg_mode == LegMode::ToolUtilization
                && self.mode.leg_mode != LegMode::ToolUtilization
            {
                self.setpoints.tool_phase = ToolPhase::Open;
                self.setpoints.tool_since = f64::NEG_INFINITY;
            }
            if next.leg_mode != LegMode::Manipulation {
                self.setpoints.manip = None;
            }
            self.mode = next;
        }
        Ok(next)
    }

    pub fn set_tool_phase(&mut self, phase: ToolPhase, time: f64) {
        if phase != self.setpoints.tool_phase {
            self.setpoints.tool_phase = phase;
            self.setpoints.tool_since = time;
        }
    }

    /// Posture-script contribution at `time`: joint targets and extra twist.
    fn script_targets(&mut self, state: &SimState) -> Option<(LegPose, Vec3)> {
        let active = self.script.as_mut()?;
        let mut t = state.time - active.start;
        for (k, seg) in active.script.segments.iter().enumerate() {
            let d = seg.duration();
            if t < d || (d == 0.0 && t <= 0.0) {
                return Some(match seg {
                    PostureSegment::JointMove { .. } => {
                        let pose = seg.joint_target(t).unwrap_or(active.held);
                        active.held = pose;
                        (pose, Vec3::zeros())
                    }
                    PostureSegment::BodyReorient { pitch, duration } => {
                        let rate = match active.reorient {
                            Some((idx, w)) if idx == k => w,
                            _ => {
                                let w =
                                    reorientation_rate(&state.body.orientation, *pitch, *duration);
                                active.reorient = Some((k, w));
                                w
                            }
                        };
                        (active.held, rate)
                    }
                });
            }
            t -= d;
        }
        let last = active.script.final_pose().unwrap_or(active.held);
        self.script = None;
        Some((last, Vec3::zeros()))
    }

    /// One control tick.
    pub fn tick(
        &mut self,
        state: &SimState,
        world: &WorldModel,
        robot: &RobotParams,
    ) -> Result<ControlOutput, ControlError> {
        let n = robot.wire_count();
        let g_norm = world.gravity.norm();
        let attached = state.attached_indices();
        let m = attached.len();
        let mass = state.suspended_mass(robot, world);

        let script = self.script_targets(state);
        let mut twist_ref = self.setpoints.twist;
        if let Some((_, w)) = &script {
            let mut angular = twist_ref.fixed_rows_mut::<3>(3);
            angular += w;
        }

        let mut tension_ref = vec![0.0; n];
        let mut rate_ref = vec![0.0; n];
        let mut currents = vec![0.0; n];
        let mut qp_converged = true;
        if m > 0 && self.mode.wire_mode != WireMode::Free {
            let geoms = state.attached_geometry(robot);
            let jac = build_jacobian(&state.body, &geoms)?;
            let limits = robot.limits_for(&attached);
            let rates = wire_rates(&state.body, &jac);
            let f = match self.mode.wire_mode {
                WireMode::WireVelocity => {
                    let reference = DVector::from_iterator(
                        m,
                        attached.iter().map(|&i| self.setpoints.wire_rates[i]),
                    );
                    for (k, &i) in attached.iter().enumerate() {
                        rate_ref[i] = reference[k];
                    }
                    wire_velocity_tensions(
                        &rates,
                        &reference,
                        mass,
                        g_norm,
                        &self.config.gains,
                        &limits,
                    )?
                }
                WireMode::CogVelocity => {
                    let target = gravity_wrench(mass, &world.gravity);
                    let sol = solve_tension_qp(&jac, &target, &limits, &self.config.qp)?;
                    qp_converged = sol.converged;
                    let reference = -(jac.matrix().transpose() * twist_ref);
                    for (k, &i) in attached.iter().enumerate() {
                        rate_ref[i] = reference[k];
                    }
                    cog_velocity_tensions(
                        &state.body,
                        &jac,
                        &rates,
                        &twist_ref,
                        &sol,
                        &self.config.gains,
                        &limits,
                    )?
                }
                WireMode::Free => unreachable!(),
            };
            let winch = self.winch.select(&attached);
            let i = tension_to_current(&f, &winch, robot.base_mass(), g_norm)?;
            for (k, &idx) in attached.iter().enumerate() {
                tension_ref[idx] = f[k];
                currents[idx] = i[k];
            }
        }

        let mut leg_error = None;
        let (joint_targets, wheels) = match script {
            Some((pose, _)) => (pose, (0.0, 0.0)),
            None => match self.mode.leg_mode {
                LegMode::WheelDriving => {
                    let d = self.setpoints.drive;
                    let pose = robot.legs.vehicle_posture(d.base_pitch);
                    (
                        pose,
                        drive_wheel_speeds(d.forward, d.yaw_rate, &robot.legs, &state.legs),
                    )
                }
                LegMode::Manipulation => match &self.setpoints.manip {
                    Some(target) => match manip_ik(target, &robot.legs) {
                        Ok(sol) => (
                            sol.pose(robot.legs.manip_hip_roll),
                            (target.wheel_spin, target.wheel_spin),
                        ),
                        Err(e) => {
                            leg_error = Some(e);
                            (state.legs.pose, (0.0, 0.0))
                        }
                    },
                    None => (robot.legs.arm_ready_posture(), (0.0, 0.0)),
                },
                LegMode::ToolUtilization => {
                    let t = state.time - self.setpoints.tool_since;
                    (
                        tool_phase_targets(&robot.tool, self.setpoints.tool_phase, t),
                        (0.0, 0.0),
                    )
                }
            },
        };

        let out = ControlOutput {
            actuation: Actuation {
                currents,
                joint_targets,
                wheel_left: wheels.0,
                wheel_right: wheels.1,
            },
            tension_ref,
            rate_ref,
            twist_ref,
            qp_converged,
            leg_error,
        };
        self.last = Some(out.clone());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn decimation_from_rate() {
        let c = ControlConfig::default();
        assert_eq!(c.decimation(1e-3).unwrap(), 5);
        let half = ControlConfig {
            control_rate: 100.0,
            ..c
        };
        assert_eq!(half.decimation(1e-3).unwrap(), 10);
        assert!(ControlConfig {
            control_rate: 5000.0,
            ..ControlConfig::default()
        }
        .decimation(1e-3)
        .is_err());
    }

    #[test]
    fn reorientation_turns_nose_up() {
        let w = reorientation_rate(&UnitQuaternion::identity(), -FRAC_PI_2, 2.0);
        let q = UnitQuaternion::from_scaled_axis(w * 2.0);
        assert!((q * Vec3::x() - Vec3::z()).norm() < 1e-12);
        // And back to level from nose-up, keeping the heading.
        let up = UnitQuaternion::from_euler_angles(0.0, -FRAC_PI_2, 0.0);
        let w = reorientation_rate(&up, 0.0, 1.0);
        let q = UnitQuaternion::from_scaled_axis(w) * up;
        assert!((q * Vec3::x() - Vec3::x()).norm() < 1e-9);
    }
}
