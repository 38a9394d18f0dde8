//! Body pose, wire geometry and the wire Jacobian.
//!
//! Conventions used throughout the crate:
//!
//! * Twists are `[linear; angular]`, both expressed in the world frame.
//! * `r` is the world-frame vector from the body reference point (the cube
//!   center, which is also the CoG) to the wire origin on the body.
//! * `s` is the unit vector from the wire origin toward its anchor, so a
//!   positive tension pulls the body toward the anchor.
//! * Wire length rates follow `l̇ = −Wᵀ q̇`: a wire shortens when the body
//!   moves toward its anchor.

use nalgebra::{DVector, Matrix6xX, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

pub type Vec3 = Vector3<f64>;
/// `[vx, vy, vz, wx, wy, wz]` in the world frame.
pub type Twist = Vector6<f64>;
/// `[fx, fy, fz, tx, ty, tz]` in the world frame, torque about the CoG.
pub type Wrench = Vector6<f64>;

/// Wires shorter than this are treated as degenerate.
pub const MIN_WIRE_LENGTH: f64 = 1e-6;

/// 6-DOF pose and twist of the main body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
}

impl Default for BodyState {
    fn default() -> Self {
        Self::at_rest(Vec3::zeros(), UnitQuaternion::identity())
    }
}

impl BodyState {
    pub fn at_rest(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
        }
    }

    pub fn twist(&self) -> Twist {
        let mut t = Twist::zeros();
        t.fixed_rows_mut::<3>(0).copy_from(&self.linear_velocity);
        t.fixed_rows_mut::<3>(3).copy_from(&self.angular_velocity);
        t
    }

    pub fn set_twist(&mut self, twist: &Twist) {
        self.linear_velocity = twist.fixed_rows::<3>(0).into_owned();
        self.angular_velocity = twist.fixed_rows::<3>(3).into_owned();
    }

    /// Maps a body-frame point to world coordinates.
    pub fn point_to_world(&self, body_point: &Vec3) -> Vec3 {
        self.position + self.orientation * body_point
    }

    /// World-frame velocity of a body-fixed point given in body coordinates.
    pub fn point_velocity(&self, body_point: &Vec3) -> Vec3 {
        self.linear_velocity
            + self
                .angular_velocity
                .cross(&(self.orientation * body_point))
    }

    /// Re-projects the stored quaternion onto the unit sphere.
    pub fn renormalize(&mut self) {
        self.orientation = UnitQuaternion::new_normalize(self.orientation.into_inner());
    }

    /// Pose reached by holding `twist` for `dt` seconds (world-frame angular
    /// velocity, so the rotation composes on the left).
    pub fn advanced(&self, twist: &Twist, dt: f64) -> Self {
        let v = twist.fixed_rows::<3>(0).into_owned();
        let w = twist.fixed_rows::<3>(3).into_owned();
        let mut next = self.clone();
        next.position += v * dt;
        next.orientation = UnitQuaternion::from_scaled_axis(w * dt) * self.orientation;
        next
    }

    pub fn pose_stamp(&self) -> PoseStamp {
        PoseStamp {
            position: self.position,
            orientation: self.orientation,
        }
    }
}

/// The pose a Jacobian (and anything derived from it) was computed at.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseStamp {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl PoseStamp {
    /// Largest of the translational distance and the rotation angle.
    pub fn distance(&self, other: &PoseStamp) -> f64 {
        let dp = (self.position - other.position).norm();
        let da = self.orientation.angle_to(&other.orientation);
        dp.max(da)
    }
}

/// One wire: where it leaves the body and where it is anchored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireGeometry {
    /// Wire origin on the body, body frame.
    pub body_attach: Vec3,
    /// Anchor point, world frame.
    pub anchor: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WireVectors {
    pub r: Vec3,
    pub s: Vec3,
    pub length: f64,
}

pub fn wire_vectors(body: &BodyState, geom: &WireGeometry) -> Result<WireVectors, GeometryError> {
    let r = body.orientation * geom.body_attach;
    let delta = geom.anchor - (body.position + r);
    let length = delta.norm();
    if length <= MIN_WIRE_LENGTH {
        return Err(GeometryError::DegenerateWire { length });
    }
    Ok(WireVectors {
        r,
        s: delta / length,
        length,
    })
}

/// The `6 × m` wire Jacobian with columns `[sᵢ; rᵢ × sᵢ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WireJacobian {
    columns: Matrix6xX<f64>,
    lengths: Vec<f64>,
    pose: PoseStamp,
}

impl WireJacobian {
    pub fn matrix(&self) -> &Matrix6xX<f64> {
        &self.columns
    }

    pub fn wire_count(&self) -> usize {
        self.columns.ncols()
    }

    pub fn column(&self, i: usize) -> Twist {
        self.columns.column(i).into_owned()
    }

    /// Geometric lengths of the wires at the pose the Jacobian was built.
    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn pose(&self) -> &PoseStamp {
        &self.pose
    }

    /// `W f`: the wrench produced on the body by tensions `f`.
    pub fn wrench(&self, tensions: &DVector<f64>) -> Wrench {
        &self.columns * tensions
    }

    /// Builds a Jacobian directly from column data. Used by the C API and
    /// by tests that need layouts without a physical pose.
    pub fn from_columns(columns: Matrix6xX<f64>) -> Self {
        let m = columns.ncols();
        Self {
            columns,
            lengths: vec![f64::NAN; m],
            pose: BodyState::default().pose_stamp(),
        }
    }
}

pub fn build_jacobian(
    body: &BodyState,
    wires: &[WireGeometry],
) -> Result<WireJacobian, GeometryError> {
    if wires.is_empty() {
        return Err(GeometryError::NoWires);
    }
    let mut columns = Matrix6xX::zeros(wires.len());
    let mut lengths = Vec::with_capacity(wires.len());
    for (i, geom) in wires.iter().enumerate() {
        let wv = wire_vectors(body, geom)?;
        let moment = wv.r.cross(&wv.s);
        let mut col = columns.column_mut(i);
        col.fixed_rows_mut::<3>(0).copy_from(&wv.s);
        col.fixed_rows_mut::<3>(3).copy_from(&moment);
        lengths.push(wv.length);
    }
    Ok(WireJacobian {
        columns,
        lengths,
        pose: body.pose_stamp(),
    })
}

/// `l̇ = −Wᵀ q̇` for the body's current twist.
pub fn wire_rates(body: &BodyState, jac: &WireJacobian) -> DVector<f64> {
    rates_for_twist(jac, &body.twist())
}

pub(crate) fn rates_for_twist(jac: &WireJacobian, twist: &Twist) -> DVector<f64> {
    -(jac.matrix().transpose() * twist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use std::f64::consts::FRAC_PI_2;

    fn rest(p: Vec3) -> BodyState {
        BodyState::at_rest(p, UnitQuaternion::identity())
    }

    #[test]
    fn axis_aligned_wire() {
        let wv = wire_vectors(
            &rest(Vec3::zeros()),
            &WireGeometry {
                body_attach: Vec3::zeros(),
                anchor: Vec3::new(0.0, 0.0, 2.0),
            },
        )
        .unwrap();
        assert_eq!(wv.r, Vec3::zeros());
        assert_eq!(wv.s, Vec3::z());
        assert_eq!(wv.length, 2.0);
    }

    #[test]
    fn translated_body_keeps_direction() {
        let wv = wire_vectors(
            &rest(Vec3::new(1.0, 0.0, 0.0)),
            &WireGeometry {
                body_attach: Vec3::zeros(),
                anchor: Vec3::new(1.0, 0.0, 3.0),
            },
        )
        .unwrap();
        assert_eq!(wv.r, Vec3::zeros());
        assert_eq!(wv.s, Vec3::z());
        assert_eq!(wv.length, 3.0);
    }

    #[test]
    fn rotated_body_matches_rotation_matrix() {
        // Rotation-matrix oracle, written out by hand for 90° about z.
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let attach = Vec3::new(0.09, 0.09, 0.09);
        let anchor = Vec3::new(0.3, -0.2, 2.0);
        let body = BodyState::at_rest(
            Vec3::new(0.1, 0.2, 0.3),
            UnitQuaternion::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2),
        );
        let wv = wire_vectors(
            &body,
            &WireGeometry {
                body_attach: attach,
                anchor,
            },
        )
        .unwrap();
        let r_expected = rz * attach;
        assert_relative_eq!(wv.r, r_expected, epsilon = 1e-12);
        assert_relative_eq!(wv.r, Vec3::new(-0.09, 0.09, 0.09), epsilon = 1e-12);
        let d = anchor - body.position - r_expected;
        assert_relative_eq!(wv.length, d.norm(), epsilon = 1e-12);
        assert_relative_eq!(wv.s, d / d.norm(), epsilon = 1e-12);
    }

    #[test]
    fn coincident_anchor_is_degenerate() {
        let err = wire_vectors(
            &rest(Vec3::new(0.0, 0.0, 1.0)),
            &WireGeometry {
                body_attach: Vec3::zeros(),
                anchor: Vec3::new(0.0, 0.0, 1.0 + 1e-7),
            },
        )
        .unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateWire { .. }));
    }

    #[test]
    fn vertical_wire_column() {
        let jac = build_jacobian(
            &rest(Vec3::zeros()),
            &[WireGeometry {
                body_attach: Vec3::zeros(),
                anchor: Vec3::new(0.0, 0.0, 1.5),
            }],
        )
        .unwrap();
        assert_eq!(jac.column(0), Twist::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn lateral_wire_moment_arm() {
        let jac = build_jacobian(
            &rest(Vec3::zeros()),
            &[WireGeometry {
                body_attach: Vec3::new(0.0, 0.0, 0.09),
                anchor: Vec3::new(5.0, 0.0, 0.09),
            }],
        )
        .unwrap();
        assert_relative_eq!(
            jac.column(0),
            Twist::new(1.0, 0.0, 0.0, 0.0, 0.09, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn empty_wire_list_rejected() {
        assert!(matches!(
            build_jacobian(&BodyState::default(), &[]),
            Err(GeometryError::NoWires)
        ));
    }

    #[test]
    fn stationary_body_has_zero_rates() {
        let body = rest(Vec3::zeros());
        let jac = build_jacobian(
            &body,
            &[WireGeometry {
                body_attach: Vec3::new(0.09, 0.09, 0.09),
                anchor: Vec3::new(1.0, 1.0, 2.0),
            }],
        )
        .unwrap();
        assert_eq!(wire_rates(&body, &jac)[0], 0.0);
    }

    #[test]
    fn rising_body_shortens_vertical_wire() {
        let mut body = rest(Vec3::zeros());
        body.linear_velocity = Vec3::new(0.0, 0.0, 0.1);
        let jac = build_jacobian(
            &body,
            &[WireGeometry {
                body_attach: Vec3::zeros(),
                anchor: Vec3::new(0.0, 0.0, 2.0),
            }],
        )
        .unwrap();
        assert_relative_eq!(wire_rates(&body, &jac)[0], -0.1, epsilon = 1e-15);
    }
}
