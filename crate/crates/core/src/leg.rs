//! Wheeled-leg kinematics and the three leg-controller modes.
//!
//! Each leg is a Roll-Pitch-Pitch chain mounted at `hip_offset` (left leg;
//! the right leg is mirrored in y). With all joints at zero the leg points
//! straight down the body −z axis. Hip roll rotates the leg plane about the
//! body x axis (positive = outward for both legs); the pitch joints rotate
//! about the rolled y axis, positive swinging the leg toward body −x.
//!
//! Inside the leg plane we use 2-D coordinates `(px, py)` along the rolled
//! "down" axis and the body −x axis, so a planar point at angles
//! `(θ_hip, θ_knee)` is `Lt (cos θh, sin θh) + Lc (cos(θh+θk), sin(θh+θk))`.

use nalgebra::{Rotation3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{LegError, LegSide};
use crate::geometry::Vec3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LegMode {
    #[default]
    WheelDriving,
    Manipulation,
    ToolUtilization,
}

impl LegMode {
    pub const ALL: [LegMode; 3] = [
        LegMode::WheelDriving,
        LegMode::Manipulation,
        LegMode::ToolUtilization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LegMode::WheelDriving => "WheelDriving",
            LegMode::Manipulation => "Manipulation",
            LegMode::ToolUtilization => "ToolUtilization",
        }
    }
}

impl LegSide {
    pub const BOTH: [LegSide; 2] = [LegSide::Left, LegSide::Right];

    /// +1 for the left leg, −1 for the right.
    pub fn sign(self) -> f64 {
        match self {
            LegSide::Left => 1.0,
            LegSide::Right => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LegAngles {
    pub hip_roll: f64,
    pub hip_pitch: f64,
    pub knee_pitch: f64,
}

impl LegAngles {
    pub fn new(hip_roll: f64, hip_pitch: f64, knee_pitch: f64) -> Self {
        Self {
            hip_roll,
            hip_pitch,
            knee_pitch,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.hip_roll, self.hip_pitch, self.knee_pitch]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Joint angles of both legs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LegPose {
    pub left: LegAngles,
    pub right: LegAngles,
}

impl LegPose {
    pub fn symmetric(angles: LegAngles) -> Self {
        Self {
            left: angles,
            right: angles,
        }
    }

    pub fn side(&self, side: LegSide) -> &LegAngles {
        match side {
            LegSide::Left => &self.left,
            LegSide::Right => &self.right,
        }
    }

    /// `[left roll, left pitch, left knee, right roll, right pitch, right knee]`.
    pub fn to_array(self) -> [f64; 6] {
        let (l, r) = (self.left.to_array(), self.right.to_array());
        [l[0], l[1], l[2], r[0], r[1], r[2]]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            left: LegAngles::new(a[0], a[1], a[2]),
            right: LegAngles::new(a[3], a[4], a[5]),
        }
    }

    pub fn max_abs_difference(&self, other: &LegPose) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Joint angles of both legs plus wheel speeds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LegJointState {
    pub pose: LegPose,
    /// Left wheel speed, rad/s; positive drives the body forward.
    pub wheel_left: f64,
    pub wheel_right: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub hip_roll: [f64; 2],
    pub hip_pitch: [f64; 2],
    pub knee_pitch: [f64; 2],
}

impl Default for JointLimits {
    fn default() -> Self {
        Self {
            hip_roll: [-0.8, 0.8],
            hip_pitch: [-3.1, 3.1],
            knee_pitch: [0.0, 3.0],
        }
    }
}

impl JointLimits {
    pub fn clamp(&self, a: &LegAngles) -> LegAngles {
        LegAngles {
            hip_roll: a.hip_roll.clamp(self.hip_roll[0], self.hip_roll[1]),
            hip_pitch: a.hip_pitch.clamp(self.hip_pitch[0], self.hip_pitch[1]),
            knee_pitch: a.knee_pitch.clamp(self.knee_pitch[0], self.knee_pitch[1]),
        }
    }

    pub fn clamp_pose(&self, p: &LegPose) -> LegPose {
        LegPose {
            left: self.clamp(&p.left),
            right: self.clamp(&p.right),
        }
    }

    pub fn contains(&self, p: &LegPose) -> bool {
        self.clamp_pose(p) == *p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LegParams {
    pub thigh_length: f64,
    pub calf_length: f64,
    pub wheel_radius: f64,
    /// Radius of the passive omni-wheel at the knee.
    pub support_wheel_radius: f64,
    /// Left hip position in the body frame; the right hip mirrors y.
    pub hip_offset: Vec3,
    /// Outward offset of the wheel center along the wheel axle.
    pub wheel_lateral_offset: f64,
    pub limits: JointLimits,
    /// Fixed posture for wheel driving (hip pitch may be offset at run time).
    pub vehicle_pose: LegAngles,
    /// Posture the arms take after entering manipulation.
    pub arm_ready_pose: LegAngles,
    /// Hip roll held during manipulation.
    pub manip_hip_roll: f64,
    /// Joint servo rate limit, rad/s.
    pub joint_rate_limit: f64,
}

impl Default for LegParams {
    fn default() -> Self {
        let (calf, wheel_r, support_r): (f64, f64, f64) = (0.23, 0.05, 0.03);
        // Knee omni-wheel and drive wheel touch the same plane at hip pitch −45°.
        let vehicle_knee = ((support_r - wheel_r) / calf).acos() + std::f64::consts::FRAC_PI_4;
        Self {
            thigh_length: 0.23,
            calf_length: calf,
            wheel_radius: wheel_r,
            support_wheel_radius: support_r,
            hip_offset: Vec3::new(0.0, 0.15, 0.0),
            wheel_lateral_offset: 0.0,
            limits: JointLimits::default(),
            vehicle_pose: LegAngles::new(0.0, -std::f64::consts::FRAC_PI_4, vehicle_knee),
            arm_ready_pose: LegAngles::new(
                0.0,
                std::f64::consts::FRAC_PI_3,
                std::f64::consts::FRAC_PI_3,
            ),
            manip_hip_roll: 0.0,
            joint_rate_limit: 2.0,
        }
    }
}

impl LegParams {
    pub fn hip(&self, side: LegSide) -> Vec3 {
        Vec3::new(
            self.hip_offset.x,
            side.sign() * self.hip_offset.y,
            self.hip_offset.z,
        )
    }

    fn roll_rotation(side: LegSide, roll: f64) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vec3::x_axis(), side.sign() * roll)
    }

    /// Unit vectors spanning the leg plane: rolled "down" and body −x.
    pub fn plane_axes(side: LegSide, roll: f64) -> (Vec3, Vec3) {
        (
            Self::roll_rotation(side, roll) * Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(-1.0, 0.0, 0.0),
        )
    }

    pub fn reach(&self) -> (f64, f64) {
        (
            (self.thigh_length - self.calf_length).abs(),
            self.thigh_length + self.calf_length,
        )
    }

    pub fn vehicle_posture(&self, pitch_offset: f64) -> LegPose {
        let mut a = self.vehicle_pose;
        a.hip_pitch += pitch_offset;
        self.limits.clamp_pose(&LegPose::symmetric(a))
    }

    pub fn arm_ready_posture(&self) -> LegPose {
        LegPose::symmetric(self.arm_ready_pose)
    }
}

/// Body-frame points of one leg.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LegPoints {
    pub hip: Vec3,
    pub knee: Vec3,
    pub wheel_center: Vec3,
    /// Unit wheel axle direction.
    pub axle: Vec3,
}

/// Planar position of the wheel center for the two pitch angles.
pub fn planar_fk(hip_pitch: f64, knee_pitch: f64, params: &LegParams) -> Vector2<f64> {
    let (lt, lc) = (params.thigh_length, params.calf_length);
    Vector2::new(
        lt * hip_pitch.cos() + lc * (hip_pitch + knee_pitch).cos(),
        lt * hip_pitch.sin() + lc * (hip_pitch + knee_pitch).sin(),
    )
}

pub fn leg_points(side: LegSide, angles: &LegAngles, params: &LegParams) -> LegPoints {
    let hip = params.hip(side);
    let (down, back) = LegParams::plane_axes(side, angles.hip_roll);
    let axle = LegParams::roll_rotation(side, angles.hip_roll) * Vec3::y();
    let lt = params.thigh_length;
    let knee = hip + down * (lt * angles.hip_pitch.cos()) + back * (lt * angles.hip_pitch.sin());
    let p = planar_fk(angles.hip_pitch, angles.knee_pitch, params);
    let wheel_center =
        hip + down * p.x + back * p.y + axle * (side.sign() * params.wheel_lateral_offset);
    LegPoints {
        hip,
        knee,
        wheel_center,
        axle,
    }
}

/// Wheel ground-contact point in the body frame, for a ground whose normal
/// is body +z.
fn wheel_contact(points: &LegPoints, radius: f64) -> Vec3 {
    let up = Vec3::z();
    let in_plane = up - points.axle * up.dot(&points.axle);
    let n = in_plane.norm();
    if n < 1e-12 {
        return points.wheel_center;
    }
    points.wheel_center - in_plane * (radius / n)
}

/// Lateral distances `(h_L, h_R)` from the body center to the wheel contacts.
pub fn track_width(joints: &LegJointState, params: &LegParams) -> (f64, f64) {
    let left = leg_points(LegSide::Left, &joints.pose.left, params);
    let right = leg_points(LegSide::Right, &joints.pose.right, params);
    (
        wheel_contact(&left, params.wheel_radius).y,
        -wheel_contact(&right, params.wheel_radius).y,
    )
}

/// Wheel speeds tracking a forward speed and yaw rate:
/// `ω_L = (vx − ψ̇ h_L)/R`, `ω_R = (vx + ψ̇ h_R)/R`.
pub fn drive_wheel_speeds(
    vx: f64,
    yaw_rate: f64,
    params: &LegParams,
    joints: &LegJointState,
) -> (f64, f64) {
    let (h_l, h_r) = track_width(joints, params);
    let r = params.wheel_radius;
    ((vx - yaw_rate * h_l) / r, (vx + yaw_rate * h_r) / r)
}

/// Target between the wheels for grasping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipTarget {
    /// Midpoint between the wheels, body frame.
    pub p_target: Vec3,
    /// Grasp width.
    pub width: f64,
    /// Wheel spin while grasping, rad/s; positive rolls the object inward.
    #[serde(default = "default_grasp_spin")]
    pub wheel_spin: f64,
}

fn default_grasp_spin() -> f64 {
    2.0
}

/// Pitch joint targets of one leg.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmAngles {
    pub hip_pitch: f64,
    pub knee_pitch: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManipSolution {
    pub left: ArmAngles,
    pub right: ArmAngles,
}

impl ManipSolution {
    pub fn pose(&self, roll: f64) -> LegPose {
        LegPose {
            left: LegAngles::new(roll, self.left.hip_pitch, self.left.knee_pitch),
            right: LegAngles::new(roll, self.right.hip_pitch, self.right.knee_pitch),
        }
    }
}

/// Planar wheel-center target of one leg: the contact point is offset by
/// `±d/2` laterally, expressed in the leg plane, and pulled toward the hip
/// by the wheel radius.
pub fn arm_target(side: LegSide, target: &ManipTarget, params: &LegParams) -> Vector2<f64> {
    let contact = target.p_target + Vec3::y() * (side.sign() * target.width * 0.5);
    let rel = contact - params.hip(side);
    let (down, back) = LegParams::plane_axes(side, params.manip_hip_roll);
    let planar = Vector2::new(rel.dot(&down), rel.dot(&back));
    let n = planar.norm();
    if n <= params.wheel_radius {
        return Vector2::zeros();
    }
    planar * (1.0 - params.wheel_radius / n)
}

/// Elbow-down analytic IK of a planar two-link arm.
pub fn two_link_ik(
    p_arm: &Vector2<f64>,
    params: &LegParams,
    side: LegSide,
) -> Result<ArmAngles, LegError> {
    let (lt, lc) = (params.thigh_length, params.calf_length);
    let (min, max) = params.reach();
    let dist = p_arm.norm();
    let slack = 1e-12 * max;
    if dist < min - slack || dist > max + slack || !dist.is_finite() {
        return Err(LegError::Unreachable {
            side,
            distance: dist,
            min,
            max,
        });
    }
    let cos_knee = ((dist * dist - lt * lt - lc * lc) / (2.0 * lt * lc)).clamp(-1.0, 1.0);
    let knee = cos_knee.acos();
    let hip = p_arm.y.atan2(p_arm.x) - (lc * knee.sin()).atan2(lt + lc * knee.cos());
    Ok(ArmAngles {
        hip_pitch: hip,
        knee_pitch: knee,
    })
}

pub fn manip_ik(target: &ManipTarget, params: &LegParams) -> Result<ManipSolution, LegError> {
    let solve = |side| two_link_ik(&arm_target(side, target, params), params, side);
    Ok(ManipSolution {
        left: solve(LegSide::Left)?,
        right: solve(LegSide::Right)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolPhase {
    #[default]
    Open,
    Closed,
}

impl ToolPhase {
    pub fn toggled(self) -> Self {
        match self {
            ToolPhase::Open => ToolPhase::Closed,
            ToolPhase::Closed => ToolPhase::Open,
        }
    }
}

/// Recorded leg postures for operating a tool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolPosePair {
    pub open_pose: LegPose,
    pub closed_pose: LegPose,
    pub transition_time: f64,
}

impl Default for ToolPosePair {
    fn default() -> Self {
        Self {
            open_pose: LegPose::symmetric(LegAngles::new(0.3, 0.9, 1.2)),
            closed_pose: LegPose::symmetric(LegAngles::new(0.05, 0.9, 1.2)),
            transition_time: 0.8,
        }
    }
}

impl ToolPosePair {
    pub fn pose(&self, phase: ToolPhase) -> LegPose {
        match phase {
            ToolPhase::Open => self.open_pose,
            ToolPhase::Closed => self.closed_pose,
        }
    }
}

/// Joint targets `t` seconds after switching to `phase`: a linear blend from
/// the other recorded pose, saturating at `transition_time`.
pub fn tool_phase_targets(pair: &ToolPosePair, phase: ToolPhase, t: f64) -> LegPose {
    let from = pair.pose(phase.toggled()).to_array();
    let to = pair.pose(phase).to_array();
    let s = if pair.transition_time > 0.0 {
        (t / pair.transition_time).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let mut out = [0.0; 6];
    for k in 0..6 {
        out[k] = if s >= 1.0 {
            to[k]
        } else {
            from[k] + (to[k] - from[k]) * s
        };
    }
    LegPose::from_array(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    fn straight_down() -> LegJointState {
        LegJointState::default()
    }

    #[test]
    fn straight_line_drive() {
        let (l, r) = drive_wheel_speeds(0.5, 0.0, &LegParams::default(), &straight_down());
        assert_relative_eq!(l, 10.0, epsilon = 1e-12);
        assert_relative_eq!(r, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn spin_in_place() {
        let params = LegParams {
            hip_offset: Vec3::new(0.0, 0.2, 0.0),
            ..LegParams::default()
        };
        let (l, r) = drive_wheel_speeds(0.0, 1.0, &params, &straight_down());
        assert_relative_eq!(l, -4.0, epsilon = 1e-12);
        assert_relative_eq!(r, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn straight_legs_track_equals_hip_offset() {
        let params = LegParams::default();
        let (l, r) = track_width(&straight_down(), &params);
        assert_relative_eq!(l, params.hip_offset.y, epsilon = 1e-15);
        assert_relative_eq!(r, params.hip_offset.y, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_posture_symmetric_track() {
        let params = LegParams::default();
        let joints = LegJointState {
            pose: LegPose::symmetric(LegAngles::new(0.3, -0.4, 1.1)),
            ..Default::default()
        };
        let (l, r) = track_width(&joints, &params);
        assert_relative_eq!(l, r, epsilon = 1e-15);
        assert!(l > params.hip_offset.y);
    }

    #[test]
    fn full_extension() {
        let a = two_link_ik(
            &Vector2::new(0.46, 0.0),
            &LegParams::default(),
            LegSide::Left,
        )
        .unwrap();
        assert_relative_eq!(a.hip_pitch, 0.0, epsilon = 1e-12);
        assert_relative_eq!(a.knee_pitch, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn right_angle_elbow() {
        let a = two_link_ik(
            &Vector2::new(0.23, 0.23),
            &LegParams::default(),
            LegSide::Left,
        )
        .unwrap();
        assert_relative_eq!(a.knee_pitch, FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(a.hip_pitch, FRAC_PI_4 - FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn unreachable_reports_leg() {
        let err = two_link_ik(
            &Vector2::new(0.5, 0.0),
            &LegParams::default(),
            LegSide::Right,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            LegError::Unreachable {
                side: LegSide::Right,
                ..
            }
        ));
        let far = ManipTarget {
            p_target: Vec3::new(-1.0, 0.0, 0.0),
            width: 0.1,
            wheel_spin: 0.0,
        };
        assert!(manip_ik(&far, &LegParams::default()).is_err());
    }

    #[test]
    fn sagittal_target_is_mirror_consistent() {
        let params = LegParams::default();
        let t = ManipTarget {
            p_target: Vec3::new(-0.35, 0.0, -0.1),
            width: 0.2,
            wheel_spin: 2.0,
        };
        let s = manip_ik(&t, &params).unwrap();
        assert_relative_eq!(s.left.hip_pitch, s.right.hip_pitch, epsilon = 1e-12);
        assert_relative_eq!(s.left.knee_pitch, s.right.knee_pitch, epsilon = 1e-12);
    }

    #[test]
    fn ik_places_wheel_center_on_target() {
        let params = LegParams::default();
        let t = ManipTarget {
            p_target: Vec3::new(-0.3, 0.05, -0.15),
            width: 0.3,
            wheel_spin: 2.0,
        };
        let s = manip_ik(&t, &params).unwrap();
        for (side, arm) in [(LegSide::Left, s.left), (LegSide::Right, s.right)] {
            let p = planar_fk(arm.hip_pitch, arm.knee_pitch, &params);
            assert_relative_eq!(p, arm_target(side, &t, &params), epsilon = 1e-12);
        }
    }

    #[test]
    fn tool_playback_endpoints_and_midpoint() {
        let pair = ToolPosePair::default();
        assert_eq!(
            tool_phase_targets(&pair, ToolPhase::Closed, 0.0),
            pair.open_pose
        );
        assert_eq!(
            tool_phase_targets(&pair, ToolPhase::Closed, 5.0),
            pair.closed_pose
        );
        assert_eq!(
            tool_phase_targets(&pair, ToolPhase::Closed, pair.transition_time),
            pair.closed_pose
        );
        let mid = tool_phase_targets(&pair, ToolPhase::Open, pair.transition_time / 2.0).to_array();
        let (a, b) = (pair.open_pose.to_array(), pair.closed_pose.to_array());
        for k in 0..6 {
            assert_relative_eq!(mid[k], 0.5 * (a[k] + b[k]), epsilon = 1e-15);
        }
    }

    #[test]
    fn vehicle_posture_puts_knee_and_wheel_on_one_plane() {
        let params = LegParams::default();
        let pose = params.vehicle_posture(0.0);
        let p = leg_points(LegSide::Left, &pose.left, &params);
        let knee_bottom = p.knee.z - params.support_wheel_radius;
        let wheel_bottom = p.wheel_center.z - params.wheel_radius;
        assert_relative_eq!(knee_bottom, wheel_bottom, epsilon = 1e-12);
        // Body center sits between the knee and wheel contacts.
        assert!(p.knee.x > 0.0 && p.wheel_center.x < 0.0);
    }
}
