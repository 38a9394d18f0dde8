//! Supervisory mode machine over the wire-mode × leg-mode product.

use serde::{Deserialize, Serialize};

use crate::error::{GuardReason, ModeError};
use crate::geometry::{build_jacobian, BodyState, Vec3, WireGeometry};
use crate::leg::{LegMode, LegParams, LegPose, ToolPosePair};
use crate::tension::{gravity_wrench, wrench_feasible, TensionLimits};
use crate::wire_control::WireMode;

/// Wheel contact force above which a wheel counts as touching the ground.
pub const CONTACT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemMode {
    pub wire_mode: WireMode,
    pub leg_mode: LegMode,
}

impl SystemMode {
    pub fn new(wire_mode: WireMode, leg_mode: LegMode) -> Self {
        Self {
            wire_mode,
            leg_mode,
        }
    }

    /// Arm and tool use need the body suspended in CoG-velocity mode.
    pub fn is_valid(&self) -> bool {
        matches!(self.leg_mode, LegMode::WheelDriving) || self.wire_mode == WireMode::CogVelocity
    }

    /// Wheel driving while the wires hold the CoG is allowed but untested.
    pub fn is_experimental(&self) -> bool {
        self.wire_mode == WireMode::CogVelocity && self.leg_mode == LegMode::WheelDriving
    }

    pub fn all() -> impl Iterator<Item = SystemMode> {
        WireMode::ALL
            .into_iter()
            .flat_map(|w| LegMode::ALL.into_iter().map(move |l| SystemMode::new(w, l)))
    }

    pub fn label(&self) -> String {
        format!("{}+{}", self.wire_mode.name(), self.leg_mode.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestSource {
    #[default]
    Operator,
    Scenario,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRequest {
    pub requested: SystemMode,
    pub source: RequestSource,
}

/// Everything the guards look at.
#[derive(Clone, Debug)]
pub struct GuardContext<'a> {
    pub body: &'a BodyState,
    /// Geometry of the attached wires only.
    pub wires: &'a [WireGeometry],
    /// Per-wheel ground contact force, newtons.
    pub contact_forces: &'a [f64],
    /// Total suspended mass, kg.
    pub mass: f64,
    pub gravity: Vec3,
    /// Limits for the attached wires, in the order of `wires`.
    pub limits: &'a TensionLimits,
    /// Largest residual force (N) accepted as feasible.
    pub feasibility_tol: f64,
}

fn reject(reason: GuardReason) -> ModeError {
    ModeError::GuardFailed(reason)
}

/// Accepts `req` if its guards hold; the current mode is never mutated.
pub fn request_transition(
    current: SystemMode,
    req: &TransitionRequest,
    ctx: &GuardContext<'_>,
) -> Result<SystemMode, ModeError> {
    let to = req.requested;
    if to == current {
        return Ok(current);
    }
    let attached = ctx.wires.len();
    let suspended_leg = !matches!(to.leg_mode, LegMode::WheelDriving);
    let required = match to.wire_mode {
        WireMode::Free if !suspended_leg => 0,
        WireMode::WireVelocity if !suspended_leg => 1,
        _ => 2,
    };
    if attached < required {
        return Err(reject(GuardReason::InsufficientWires {
            required,
            attached,
        }));
    }
    if !to.is_valid() {
        return Err(reject(GuardReason::RequiresSuspension {
            leg: to.leg_mode.name(),
        }));
    }
    if to.wire_mode == WireMode::CogVelocity && current.wire_mode != WireMode::CogVelocity {
        let jac =
            build_jacobian(ctx.body, ctx.wires).map_err(|e| reject(GuardReason::Geometry(e)))?;
        let target = gravity_wrench(ctx.mass, &ctx.gravity);
        let feas = wrench_feasible(&jac, &target, ctx.limits, ctx.feasibility_tol)
            .map_err(|e| reject(GuardReason::Tension(e)))?;
        if !feas.feasible {
            return Err(reject(GuardReason::InfeasibleWrench {
                residual: feas.residual_norm,
            }));
        }
    }
    if suspended_leg && to.leg_mode != current.leg_mode {
        let force = ctx.contact_forces.iter().copied().fold(0.0, f64::max);
        if force > CONTACT_THRESHOLD {
            return Err(reject(GuardReason::GroundContact { force }));
        }
    }
    Ok(to)
}

/// Canonical postures and rates used to script mode changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostureConfig {
    /// Body pitch in manipulation form, rad.
    pub manipulation_pitch: f64,
    /// Body pitch rate while reorienting, rad/s.
    pub body_pitch_rate: f64,
}

impl Default for PostureConfig {
    fn default() -> Self {
        Self {
            manipulation_pitch: -std::f64::consts::FRAC_PI_2,
            body_pitch_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PostureSegment {
    /// Rotate the body to `pitch` (about the yaw-aligned y axis).
    BodyReorient { pitch: f64, duration: f64 },
    /// Linear joint interpolation.
    JointMove {
        from: LegPose,
        to: LegPose,
        duration: f64,
    },
}

impl PostureSegment {
    pub fn duration(&self) -> f64 {
        match self {
            PostureSegment::BodyReorient { duration, .. }
            | PostureSegment::JointMove { duration, .. } => *duration,
        }
    }

    /// Joint targets `t` seconds into a joint move.
    pub fn joint_target(&self, t: f64) -> Option<LegPose> {
        match self {
            PostureSegment::JointMove { from, to, duration } => {
                let s = if *duration > 0.0 {
                    (t / duration).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                if s >= 1.0 {
                    return Some(*to);
                }
                let (a, b) = (from.to_array(), to.to_array());
                let mut out = [0.0; 6];
                for k in 0..6 {
                    out[k] = a[k] + (b[k] - a[k]) * s;
                }
                Some(LegPose::from_array(out))
            }
            PostureSegment::BodyReorient { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PostureScript {
    pub segments: Vec<PostureSegment>,
}

impl PostureScript {
    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(PostureSegment::duration).sum()
    }

    /// Last commanded joint pose, if any segment moves the joints.
    pub fn final_pose(&self) -> Option<LegPose> {
        self.segments.iter().rev().find_map(|s| match s {
            PostureSegment::JointMove { to, .. } => Some(*to),
            _ => None,
        })
    }
}

fn canonical_pitch(leg: LegMode, cfg: &PostureConfig) -> f64 {
    match leg {
        LegMode::WheelDriving => 0.0,
        LegMode::Manipulation | LegMode::ToolUtilization => cfg.manipulation_pitch,
    }
}

fn canonical_pose(leg: LegMode, legs: &LegParams, tool: &ToolPosePair) -> LegPose {
    match leg {
        LegMode::WheelDriving => legs.vehicle_posture(0.0),
        LegMode::Manipulation => legs.arm_ready_posture(),
        LegMode::ToolUtilization => tool.open_pose,
    }
}

/// Timed setpoints taking the legs (and body attitude) from `from` to the
/// canonical posture of `to`, starting at joint pose `start`.
pub fn posture_sequence(
    from: SystemMode,
    to: SystemMode,
    start: &LegPose,
    legs: &LegParams,
    tool: &ToolPosePair,
    cfg: &PostureConfig,
) -> PostureScript {
    if from.leg_mode == to.leg_mode {
        return PostureScript::default();
    }
    let target = canonical_pose(to.leg_mode, legs, tool);
    let rate = legs.joint_rate_limit.max(1e-9);
    let joints = PostureSegment::JointMove {
        from: *start,
        to: target,
        duration: start.max_abs_difference(&target) / rate,
    };
    let (p0, p1) = (
        canonical_pitch(from.leg_mode, cfg),
        canonical_pitch(to.leg_mode, cfg),
    );
    let mut segments = Vec::new();
    let reorient = (p1 - p0).abs() > 0.0;
    let turn = PostureSegment::BodyReorient {
        pitch: p1,
        duration: (p1 - p0).abs() / cfg.body_pitch_rate.max(1e-9),
    };
    if to.leg_mode == LegMode::WheelDriving {
        segments.push(joints);
        if reorient {
            segments.push(turn);
        }
    } else {
        if reorient {
            segments.push(turn);
        }
        segments.push(joints);
    }
    PostureScript { segments }
}
