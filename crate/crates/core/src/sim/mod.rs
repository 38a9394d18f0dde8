//! Fixed-step rigid-body plant: one 6-DOF body hanging from winched wires,
//! rolling on wheeled legs, optionally carrying payloads.
//!
//! Integration is kick-drift-kick leapfrog. Wires are stiff unilateral
//! spring-dampers between the geometric length and the paid-out length; each
//! winch is a massless drum that sticks while the wire tension stays inside
//! its friction band and slips at the band edge otherwise.

pub mod world;

use nalgebra::{DVector, Matrix3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::LegSide;
use crate::error::SimError;
use crate::geometry::{BodyState, Vec3, WireGeometry};
use crate::leg::{leg_points, LegJointState, LegParams, LegPose, ToolPosePair};
use crate::tension::TensionLimits;
use crate::wire_control::{LoadNorm, WinchModel};

pub use world::{PatchContact, PayloadSpec, TerrainPatch, WorldModel};

/// Contact force on a payload above which a wheel counts as gripping it.
pub const GRASP_FORCE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Physics step, s.
    pub dt: f64,
    pub wire_stiffness: f64,
    pub wire_damping: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    /// Slip speed at which Coulomb friction saturates, m/s.
    pub friction_velocity: f64,
    /// Contacts deeper than this behind a face are ignored, m.
    pub contact_depth: f64,
    /// Twist norm treated as numerical blow-up.
    pub divergence_speed: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            wire_stiffness: 1e5,
            wire_damping: 1e3,
            contact_stiffness: 2e4,
            contact_damping: 450.0,
            friction_velocity: 0.05,
            contact_depth: 0.1,
            divergence_speed: 100.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt <= 0.01) {
            return Err(SimError::InvalidStep { dt: self.dt });
        }
        Ok(())
    }
}

/// Winch drive parameters, one entry per wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WinchParams {
    pub radius: f64,
    pub torque_constant: Vec<f64>,
    pub coulomb_current: Vec<f64>,
    pub load_friction: Vec<f64>,
    pub load_norm: LoadNorm,
    /// Motor current saturation, A.
    pub current_limit: f64,
    /// Drum surface speed limit, m/s.
    pub speed_limit: f64,
}

impl Default for WinchParams {
    fn default() -> Self {
        Self {
            radius: 0.0075,
            torque_constant: vec![0.18; 5],
            coulomb_current: vec![0.05; 5],
            load_friction: vec![0.1; 5],
            load_norm: LoadNorm::Euclidean,
            current_limit: 10.0,
            speed_limit: 0.4,
        }
    }
}

impl WinchParams {
    pub fn model(&self) -> WinchModel {
        WinchModel {
            radius: self.radius,
            torque_constants: DVector::from_vec(self.torque_constant.clone()),
            coulomb_current: DVector::from_vec(self.coulomb_current.clone()),
            load_friction: DVector::from_vec(self.load_friction.clone()),
            load_norm: self.load_norm,
        }
    }

    pub fn from_model(model: &WinchModel, current_limit: f64, speed_limit: f64) -> Self {
        Self {
            radius: model.radius,
            torque_constant: model.torque_constants.iter().copied().collect(),
            coulomb_current: model.coulomb_current.iter().copied().collect(),
            load_friction: model.load_friction.iter().copied().collect(),
            load_norm: model.load_norm,
            current_limit,
            speed_limit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotParams {
    /// Body mass including everything not listed separately, kg.
    pub mass: f64,
    /// Body-frame inertia about the CoG, kg·m².
    pub inertia: [[f64; 3]; 3],
    pub half_extent: f64,
    /// Wire origins, body frame: four front vertices then the tool wire.
    pub wire_origins: Vec<Vec3>,
    /// Lumped mass per leg added to the body, kg.
    pub leg_mass: f64,
    pub legs: LegParams,
    pub tool: ToolPosePair,
    pub tool_mass: f64,
    pub winch: WinchParams,
    pub f_min: Vec<f64>,
    pub f_max: Vec<f64>,
}

impl Default for RobotParams {
    fn default() -> Self {
        let h = 0.09;
        Self {
            mass: 12.0,
            inertia: [[0.2, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, 0.2]],
            half_extent: h,
            wire_origins: vec![
                Vec3::new(h, h, h),
                Vec3::new(h, -h, h),
                Vec3::new(h, h, -h),
                Vec3::new(h, -h, -h),
                Vec3::new(-h, 0.0, 0.0),
            ],
            leg_mass: 0.0,
            legs: LegParams::default(),
            tool: ToolPosePair::default(),
            tool_mass: 0.8,
            winch: WinchParams::default(),
            f_min: vec![2.0; 5],
            f_max: vec![120.0, 120.0, 120.0, 120.0, 420.0],
        }
    }
}

impl RobotParams {
    pub fn wire_count(&self) -> usize {
        self.wire_origins.len()
    }

    /// Body plus legs, without payloads or tools.
    pub fn base_mass(&self) -> f64 {
        self.mass + 2.0 * self.leg_mass
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.inertia[r][c])
    }

    pub fn limits_for(&self, indices: &[usize]) -> TensionLimits {
        let pick = |v: &[f64]| DVector::from_iterator(indices.len(), indices.iter().map(|&i| v[i]));
        TensionLimits {
            f_min: pick(&self.f_min),
            f_max: pick(&self.f_max),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let m = self.wire_count();
        if !(self.mass > 0.0) {
            return Err("robot mass must be positive".into());
        }
        if self.leg_mass < 0.0 || self.tool_mass < 0.0 {
            return Err("leg and tool masses must be non-negative".into());
        }
        let i = self.inertia_matrix();
        if (i - i.transpose()).amax() > 1e-12 || i.symmetric_eigenvalues().min() <= 0.0 {
            return Err("inertia must be symmetric positive definite".into());
        }
        for (name, len) in [
            ("f_min", self.f_min.len()),
            ("f_max", self.f_max.len()),
            ("winch.torque_constant", self.winch.torque_constant.len()),
            ("winch.coulomb_current", self.winch.coulomb_current.len()),
            ("winch.load_friction", self.winch.load_friction.len()),
        ] {
            if len != m {
                return Err(format!("{name} has {len} entries, expected {m}"));
            }
        }
        self.limits_for(&(0..m).collect::<Vec<_>>())
            .validate()
            .map_err(|e| e.to_string())?;
        self.winch.model().validate().map_err(|e| e.to_string())?;
        if !(self.winch.current_limit > 0.0 && self.winch.speed_limit > 0.0) {
            return Err("winch current and speed limits must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WireState {
    pub attached: bool,
    pub anchor: Vec3,
    /// Paid-out (unstretched) length, m.
    pub length: f64,
    /// Paid-out rate, m/s; negative while winding in.
    pub rate: f64,
    pub tension: f64,
    /// Applied motor current, A.
    pub current: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadState {
    pub position: Vec3,
    pub velocity: Vec3,
    /// Body-frame offset while held.
    pub grasped: Option<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub time: f64,
    pub body: BodyState,
    pub legs: LegJointState,
    pub wires: Vec<WireState>,
    pub payloads: Vec<PayloadState>,
    pub tool_retained: bool,
}

impl SimState {
    pub fn new(
        body: BodyState,
        legs: LegJointState,
        robot: &RobotParams,
        world: &WorldModel,
    ) -> Self {
        Self {
            time: 0.0,
            body,
            legs,
            wires: vec![WireState::default(); robot.wire_count()],
            payloads: world
                .payloads
                .iter()
                .map(|p| PayloadState {
                    position: p.position,
                    velocity: Vec3::zeros(),
                    grasped: None,
                })
                .collect(),
            tool_retained: false,
        }
    }

    pub fn attached_indices(&self) -> Vec<usize> {
        (0..self.wires.len())
            .filter(|&i| self.wires[i].attached)
            .collect()
    }

    pub fn wire_geometry(&self, robot: &RobotParams, i: usize) -> WireGeometry {
        WireGeometry {
            body_attach: robot.wire_origins[i],
            anchor: self.wires[i].anchor,
        }
    }

    /// Geometry of attached wires, in index order.
    pub fn attached_geometry(&self, robot: &RobotParams) -> Vec<WireGeometry> {
        self.attached_indices()
            .into_iter()
            .map(|i| self.wire_geometry(robot, i))
            .collect()
    }

    /// Straight-line distance from the wire origin to its anchor.
    pub fn geometric_length(&self, robot: &RobotParams, i: usize) -> f64 {
        (self.wires[i].anchor - self.body.point_to_world(&robot.wire_origins[i])).norm()
    }

    /// Mass the wires and contacts carry: body, legs, tool and held payloads.
    pub fn suspended_mass(&self, robot: &RobotParams, world: &WorldModel) -> f64 {
        let mut m = robot.base_mass();
        if self.tool_retained {
            m += robot.tool_mass;
        }
        for (p, spec) in self.payloads.iter().zip(&world.payloads) {
            if p.grasped.is_some() {
                m += spec.mass;
            }
        }
        m
    }

    /// Sets a wire's paid-out length so that it carries `tension` statically.
    pub fn pretension(
        &mut self,
        robot: &RobotParams,
        params: &SimParams,
        i: usize,
        tension: f64,
    ) -> Result<(), SimError> {
        self.check_index(i)?;
        if !self.wires[i].attached {
            return Err(SimError::NotAttached { index: i });
        }
        let l = self.geometric_length(robot, i);
        let w = &mut self.wires[i];
        w.length = l - tension.max(0.0) / params.wire_stiffness;
        w.tension = tension.max(0.0);
        Ok(())
    }

    fn check_index(&self, i: usize) -> Result<(), SimError> {
        if i >= self.wires.len() {
            return Err(SimError::NoSuchWire {
                index: i,
                count: self.wires.len(),
            });
        }
        Ok(())
    }
}

/// Hooks wire `i` to `anchor`; paid-out length starts at the geometric
/// distance and tension at zero.
pub fn attach_wire(
    state: &mut SimState,
    robot: &RobotParams,
    i: usize,
    anchor: Vec3,
) -> Result<(), SimError> {
    state.check_index(i)?;
    if state.wires[i].attached {
        return Err(SimError::AlreadyAttached { index: i });
    }
    let geom = WireGeometry {
        body_attach: robot.wire_origins[i],
        anchor,
    };
    let v = crate::geometry::wire_vectors(&state.body, &geom)?;
    state.wires[i] = WireState {
        attached: true,
        anchor,
        length: v.length,
        rate: 0.0,
        tension: 0.0,
        current: 0.0,
    };
    Ok(())
}

pub fn detach_wire(state: &mut SimState, i: usize) -> Result<(), SimError> {
    state.check_index(i)?;
    if !state.wires[i].attached {
        return Err(SimError::NotAttached { index: i });
    }
    state.wires[i] = WireState::default();
    Ok(())
}

/// Inputs held constant over one physics step.
#[derive(Clone, Debug, PartialEq)]
pub struct Actuation {
    /// Motor current per wire (all wires, attached or not), A.
    pub currents: Vec<f64>,
    pub joint_targets: LegPose,
    pub wheel_left: f64,
    pub wheel_right: f64,
}

impl Actuation {
    pub fn idle(robot: &RobotParams, pose: LegPose) -> Self {
        Self {
            currents: vec![0.0; robot.wire_count()],
            joint_targets: pose,
            wheel_left: 0.0,
            wheel_right: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContactElement {
    WheelLeft,
    WheelRight,
    KneeLeft,
    KneeRight,
    Corner(u8),
}

impl ContactElement {
    pub fn is_wheel(self) -> bool {
        !matches!(self, ContactElement::Corner(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContactForce {
    pub element: ContactElement,
    pub patch: usize,
    pub point: Vec3,
    pub normal_force: f64,
    pub force: Vec3,
}

/// Normal contact force per leg contact element against the terrain, N.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContactFlags {
    pub wheel_left: f64,
    pub wheel_right: f64,
    pub knee_left: f64,
    pub knee_right: f64,
    /// Sum over the body corners.
    pub body: f64,
    /// Terrain patches touched by wheels or knees.
    pub wheel_patches: Vec<usize>,
}

impl ContactFlags {
    pub fn wheel_forces(&self) -> [f64; 4] {
        [
            self.wheel_left,
            self.wheel_right,
            self.knee_left,
            self.knee_right,
        ]
    }

    pub fn total(&self) -> f64 {
        self.wheel_forces().iter().sum::<f64>() + self.body
    }

    fn add(&mut self, c: &ContactForce) {
        let slot = match c.element {
            ContactElement::WheelLeft => &mut self.wheel_left,
            ContactElement::WheelRight => &mut self.wheel_right,
            ContactElement::KneeLeft => &mut self.knee_left,
            ContactElement::KneeRight => &mut self.knee_right,
            ContactElement::Corner(_) => &mut self.body,
        };
        *slot += c.normal_force;
        if c.element.is_wheel() && c.normal_force > 0.0 && !self.wheel_patches.contains(&c.patch) {
            self.wheel_patches.push(c.patch);
            self.wheel_patches.sort_unstable();
        }
    }
}

/// Result of one step, for logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub contacts: ContactFlags,
    /// Payload indices latched during this step.
    pub grasped: Vec<usize>,
}

#[derive(Clone, Copy)]
struct LegGeometry {
    /// Body-frame wheel and knee centers, left then right.
    wheel: [Vec3; 2],
    knee: [Vec3; 2],
    axle: [Vec3; 2],
    /// Body-frame velocities from joint motion.
    wheel_vel: [Vec3; 2],
    knee_vel: [Vec3; 2],
}

fn leg_geometry(prev: &LegPose, next: &LegPose, legs: &LegParams, dt: f64) -> LegGeometry {
    let mut g = LegGeometry {
        wheel: [Vec3::zeros(); 2],
        knee: [Vec3::zeros(); 2],
        axle: [Vec3::zeros(); 2],
        wheel_vel: [Vec3::zeros(); 2],
        knee_vel: [Vec3::zeros(); 2],
    };
    for (k, side) in LegSide::BOTH.into_iter().enumerate() {
        let a = leg_points(side, prev.side(side), legs);
        let b = leg_points(side, next.side(side), legs);
        g.wheel[k] = b.wheel_center;
        g.knee[k] = b.knee;
        g.axle[k] = b.axle;
        g.wheel_vel[k] = (b.wheel_center - a.wheel_center) / dt;
        g.knee_vel[k] = (b.knee - a.knee) / dt;
    }
    g
}

fn corners(h: f64) -> impl Iterator<Item = Vec3> {
    (0..8).map(move |k| {
        let s = |bit: usize| if k & bit == 0 { -h } else { h };
        Vec3::new(s(1), s(2), s(4))
    })
}

fn contact_law(pen: f64, normal: &Vec3, v_rel: &Vec3, mu: f64, params: &SimParams) -> (f64, Vec3) {
    let vn = v_rel.dot(normal);
    let fn_ = (params.contact_stiffness * pen - params.contact_damping * vn).max(0.0);
    let vt = v_rel - normal * vn;
    let friction = if mu > 0.0 && fn_ > 0.0 {
        -vt * (mu * fn_ / vt.norm().max(params.friction_velocity))
    } else {
        Vec3::zeros()
    };
    (fn_, normal * fn_ + friction)
}

/// Kinematic inputs to a force evaluation.
struct Kinematics<'a> {
    body: &'a BodyState,
    legs: &'a LegGeometry,
    wheel_speed: [f64; 2],
    payload_pos: &'a [Vec3],
    payload_vel: &'a [Vec3],
}

struct Forces {
    force: Vec3,
    torque: Vec3,
    payload: Vec<Vec3>,
    contacts: Vec<ContactForce>,
    /// Per payload, per wheel normal force.
    grip: Vec<[f64; 2]>,
    winch_rate: Vec<f64>,
    tension: Vec<f64>,
}

struct Model<'a> {
    robot: &'a RobotParams,
    world: &'a WorldModel,
    params: &'a SimParams,
    winch: WinchModel,
}

impl Model<'_> {
    fn robot_contacts(&self, k: &Kinematics<'_>) -> Vec<ContactForce> {
        let p = self.params;
        let legs = &self.robot.legs;
        let mut out = Vec::new();
        let spheres = [
            (ContactElement::WheelLeft, 0usize, true),
            (ContactElement::WheelRight, 1, true),
            (ContactElement::KneeLeft, 0, false),
            (ContactElement::KneeRight, 1, false),
        ];
        for (element, side, is_wheel) in spheres {
            let (local, local_vel, radius) = if is_wheel {
                (
                    k.legs.wheel[side],
                    k.legs.wheel_vel[side],
                    legs.wheel_radius,
                )
            } else {
                (
                    k.legs.knee[side],
                    k.legs.knee_vel[side],
                    legs.support_wheel_radius,
                )
            };
            let c = k.body.point_to_world(&local);
            let vc = k.body.point_velocity(&local) + k.body.orientation * local_vel;
            for (patch, hit) in self.world.sphere_contacts(&c, radius, p.contact_depth) {
                let mut v = vc;
                let mu = if is_wheel {
                    let axle = k.body.orientation * k.legs.axle[side];
                    // Rigid rim: the ground absorbs the penetration.
                    v += axle.cross(&(-hit.normal * radius)) * k.wheel_speed[side];
                    self.world.terrain[patch].mu
                } else {
                    0.0
                };
                let (normal_force, force) = contact_law(hit.penetration, &hit.normal, &v, mu, p);
                out.push(ContactForce {
                    element,
                    patch,
                    point: hit.point,
                    normal_force,
                    force,
                });
            }
        }
        for (idx, corner) in corners(self.robot.half_extent).enumerate() {
            let pw = k.body.point_to_world(&corner);
            let v = k.body.point_velocity(&corner);
            for (patch, hit) in self.world.point_contacts(&pw, p.contact_depth) {
                let (normal_force, force) = contact_law(
                    hit.penetration,
                    &hit.normal,
                    &v,
                    self.world.terrain[patch].mu,
                    p,
                );
                out.push(ContactForce {
                    element: ContactElement::Corner(idx as u8),
                    patch,
                    point: pw,
                    normal_force,
                    force,
                });
            }
        }
        out
    }

    fn evaluate(&self, k: &Kinematics<'_>, state: &SimState, act: &Actuation) -> Forces {
        let p = self.params;
        let body = k.body;
        let g = self.world.gravity;
        let mut force = Vec3::zeros();
        let mut torque = Vec3::zeros();
        let apply = |f: Vec3, at: Vec3, force: &mut Vec3, torque: &mut Vec3| {
            *force += f;
            *torque += (at - body.position).cross(&f);
        };

        force += g * self.robot.base_mass();
        if state.tool_retained {
            let at = body.point_to_world(&self.robot.wire_origins[self.robot.wire_count() - 1]);
            apply(g * self.robot.tool_mass, at, &mut force, &mut torque);
        }

        // Wires.
        let m = state.wires.len();
        let weight = self.robot.base_mass() * g.norm();
        let prev = DVector::from_iterator(m, state.wires.iter().map(|w| w.tension));
        let load = self.winch.load_measure(&prev);
        let mut winch_rate = vec![0.0; m];
        let mut tension = vec![0.0; m];
        for i in 0..m {
            let w = &state.wires[i];
            if !w.attached {
                continue;
            }
            let origin = self.robot.wire_origins[i];
            let at = body.point_to_world(&origin);
            let delta = w.anchor - at;
            let l = delta.norm();
            if l <= crate::geometry::MIN_WIRE_LENGTH {
                continue;
            }
            let s = delta / l;
            let ldot = -s.dot(&body.point_velocity(&origin));
            let per_amp = self.winch.force_per_amp(i);
            let current = act.currents[i].clamp(
                -self.robot.winch.current_limit,
                self.robot.winch.current_limit,
            );
            let (rate, t) = winch_response(
                l - w.length,
                ldot,
                per_amp * current,
                per_amp * self.winch.friction_current(i, load[i], weight),
                self.robot.winch.speed_limit,
                p,
            );
            winch_rate[i] = rate;
            tension[i] = t;
            apply(s * t, at, &mut force, &mut torque);
        }

        // Terrain contacts of the robot.
        let contacts = self.robot_contacts(k);
        for c in &contacts {
            apply(c.force, c.point, &mut force, &mut torque);
        }

        // Payloads.
        let mut payload = vec![Vec3::zeros(); state.payloads.len()];
        let mut grip = vec![[0.0; 2]; state.payloads.len()];
        for (j, spec) in self.world.payloads.iter().enumerate() {
            let (pos, vel) = (k.payload_pos[j], k.payload_vel[j]);
            let mut f = g * spec.mass;
            for (_, hit) in self
                .world
                .sphere_contacts(&pos, spec.radius, p.contact_depth)
            {
                let (_, fc) = contact_law(hit.penetration, &hit.normal, &vel, spec.mu, p);
                f += fc;
            }
            if state.payloads[j].grasped.is_some() {
                apply(f, pos, &mut force, &mut torque);
                continue;
            }
            for side in 0..2 {
                let local = k.legs.wheel[side];
                let c = body.point_to_world(&local);
                let d = c - pos;
                let dist = d.norm();
                let reach = spec.radius + self.robot.legs.wheel_radius;
                if dist >= reach || dist < 1e-12 {
                    continue;
                }
                let n = d / dist;
                let vc = body.point_velocity(&local) + body.orientation * k.legs.wheel_vel[side];
                let (fn_, fw) = contact_law(reach - dist, &n, &(vc - vel), spec.mu, p);
                grip[j][side] = fn_;
                let point = pos + n * spec.radius;
                apply(fw, point, &mut force, &mut torque);
                f -= fw;
            }
            payload[j] = f;
        }

        Forces {
            force,
            torque,
            payload,
            contacts,
            grip,
            winch_rate,
            tension,
        }
    }
}

/// Massless winch: returns `(paid-out rate, tension)` for wire stretch `e`,
/// geometric rate `ldot`, motor pull `motor` and friction `friction` (N).
fn winch_response(
    e: f64,
    ldot: f64,
    motor: f64,
    friction: f64,
    v_max: f64,
    p: &SimParams,
) -> (f64, f64) {
    let (k, c) = (p.wire_stiffness, p.wire_damping);
    let stuck = if e > 0.0 { k * e + c * ldot } else { 0.0 };
    let (upper, lower) = (motor + friction, motor - friction);
    let rate = if stuck > upper {
        ldot - (upper.max(0.0) - k * e) / c
    } else if lower > 0.0 && stuck < lower {
        ldot - (lower - k * e) / c
    } else {
        0.0
    };
    let rate = rate.clamp(-v_max, v_max);
    let t = if e > 0.0 {
        (k * e + c * (ldot - rate)).max(0.0)
    } else {
        0.0
    };
    (rate, t)
}

fn composite_inertia(state: &SimState, robot: &RobotParams, world: &WorldModel) -> Matrix3<f64> {
    let mut i = robot.inertia_matrix();
    let mut point = |m: f64, r: &Vec3| {
        i += (Matrix3::identity() * r.norm_squared() - r * r.transpose()) * m;
    };
    if state.tool_retained {
        point(robot.tool_mass, &robot.wire_origins[robot.wire_count() - 1]);
    }
    for (p, spec) in state.payloads.iter().zip(&world.payloads) {
        if let Some(r) = &p.grasped {
            point(spec.mass, r);
        }
    }
    i
}

fn servo(pose: &LegPose, target: &LegPose, rate: f64, dt: f64) -> LegPose {
    let (a, b) = (pose.to_array(), target.to_array());
    let step = rate * dt;
    let mut out = [0.0; 6];
    for k in 0..6 {
        out[k] = a[k] + (b[k] - a[k]).clamp(-step, step);
    }
    LegPose::from_array(out)
}

fn world_inertia_inv(q: &UnitQuaternion<f64>, inv_body: &Matrix3<f64>) -> Matrix3<f64> {
    let r = q.to_rotation_matrix();
    r.matrix() * inv_body * r.matrix().transpose()
}

/// Advances the plant by `dt`.
pub fn step(
    state: &mut SimState,
    act: &Actuation,
    world: &WorldModel,
    robot: &RobotParams,
    params: &SimParams,
    dt: f64,
) -> Result<StepReport, SimError> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(SimError::InvalidStep { dt });
    }
    let model = Model {
        robot,
        world,
        params,
        winch: robot.winch.model(),
    };
    let h = dt;

    // Joints are ideal rate-limited position servos; wheels follow speed.
    let limits = &robot.legs.limits;
    let target = limits.clamp_pose(&act.joint_targets);
    let next_pose = servo(&state.legs.pose, &target, robot.legs.joint_rate_limit, h);
    let legs = leg_geometry(&state.legs.pose, &next_pose, &robot.legs, h);
    state.legs.pose = next_pose;
    state.legs.wheel_left = act.wheel_left;
    state.legs.wheel_right = act.wheel_right;
    let wheel_speed = [act.wheel_left, act.wheel_right];

    // Held payloads and a retained tool move rigidly with the body.
    let total = state.suspended_mass(robot, world);
    let inv_body = composite_inertia(state, robot, world)
        .try_inverse()
        .unwrap_or_else(Matrix3::identity);

    let free: Vec<usize> = (0..state.payloads.len())
        .filter(|&j| state.payloads[j].grasped.is_none())
        .collect();
    let payload_kin = |state: &SimState| -> (Vec<Vec3>, Vec<Vec3>) {
        state
            .payloads
            .iter()
            .map(|p| match &p.grasped {
                Some(r) => (state.body.point_to_world(r), state.body.point_velocity(r)),
                None => (p.position, p.velocity),
            })
            .unzip()
    };

    // First half kick.
    let (pp, pv) = payload_kin(state);
    let f1 = model.evaluate(
        &Kinematics {
            body: &state.body,
            legs: &legs,
            wheel_speed,
            payload_pos: &pp,
            payload_vel: &pv,
        },
        state,
        act,
    );
    let inv_w = world_inertia_inv(&state.body.orientation, &inv_body);
    let mut momentum =
        inv_w.try_inverse().unwrap_or_else(Matrix3::identity) * state.body.angular_velocity;
    state.body.linear_velocity += f1.force * (0.5 * h / total);
    momentum += f1.torque * (0.5 * h);
    for &j in &free {
        let m = world.payloads[j].mass;
        state.payloads[j].velocity += f1.payload[j] * (0.5 * h / m);
    }

    // Drift.
    state.body.position += state.body.linear_velocity * h;
    let q0 = state.body.orientation;
    let w0 = world_inertia_inv(&q0, &inv_body) * momentum;
    let q_mid = UnitQuaternion::from_scaled_axis(w0 * (0.5 * h)) * q0;
    let w_mid = world_inertia_inv(&q_mid, &inv_body) * momentum;
    state.body.orientation = UnitQuaternion::from_scaled_axis(w_mid * h) * q0;
    state.body.renormalize();
    state.body.angular_velocity = world_inertia_inv(&state.body.orientation, &inv_body) * momentum;
    for &j in &free {
        let v = state.payloads[j].velocity;
        state.payloads[j].position += v * h;
    }

    // Second half kick with forces at the drifted state.
    let (pp, pv) = payload_kin(state);
    let f2 = model.evaluate(
        &Kinematics {
            body: &state.body,
            legs: &legs,
            wheel_speed,
            payload_pos: &pp,
            payload_vel: &pv,
        },
        state,
        act,
    );
    state.body.linear_velocity += f2.force * (0.5 * h / total);
    momentum += f2.torque * (0.5 * h);
    state.body.angular_velocity = world_inertia_inv(&state.body.orientation, &inv_body) * momentum;
    for &j in &free {
        let m = world.payloads[j].mass;
        state.payloads[j].velocity += f2.payload[j] * (0.5 * h / m);
    }

    for (i, w) in state.wires.iter_mut().enumerate() {
        if !w.attached {
            continue;
        }
        w.rate = 0.5 * (f1.winch_rate[i] + f2.winch_rate[i]);
        w.length = (w.length + w.rate * h).max(crate::geometry::MIN_WIRE_LENGTH);
        w.tension = f2.tension[i];
        w.current = act.currents[i].clamp(-robot.winch.current_limit, robot.winch.current_limit);
    }
    state.time += h;

    let mut report = StepReport::default();
    for c in &f2.contacts {
        report.contacts.add(c);
    }
    for (j, g) in f2.grip.iter().enumerate() {
        let p = &state.payloads[j];
        if p.grasped.is_none()
            && g[0] > GRASP_FORCE
            && g[1] > GRASP_FORCE
            && act.wheel_left > 0.0
            && act.wheel_right > 0.0
        {
            let offset = state.body.orientation.inverse() * (p.position - state.body.position);
            report.grasped.push(j);
            state.payloads[j].grasped = Some(offset);
        }
    }
    sync_held_payloads(state);

    let speed = state.body.twist().norm();
    if !speed.is_finite() || speed > params.divergence_speed {
        return Err(SimError::NumericalDivergence {
            time: state.time,
            speed,
        });
    }
    Ok(report)
}

fn sync_held_payloads(state: &mut SimState) {
    let body = state.body.clone();
    for p in state.payloads.iter_mut() {
        if let Some(r) = &p.grasped {
            p.position = body.point_to_world(r);
            p.velocity = body.point_velocity(r);
        }
    }
}

/// Lets go of payload `j`; it keeps the velocity it had while held.
pub fn release_payload(state: &mut SimState, j: usize) {
    if let Some(p) = state.payloads.get_mut(j) {
        p.grasped = None;
    }
}

/// Terrain contact forces of the wheels, knees and body at the current state.
pub fn contact_flags(
    state: &SimState,
    world: &WorldModel,
    robot: &RobotParams,
    params: &SimParams,
) -> ContactFlags {
    let model = Model {
        robot,
        world,
        params,
        winch: robot.winch.model(),
    };
    let legs = leg_geometry(&state.legs.pose, &state.legs.pose, &robot.legs, 1.0);
    let k = Kinematics {
        body: &state.body,
        legs: &legs,
        wheel_speed: [state.legs.wheel_left, state.legs.wheel_right],
        payload_pos: &[],
        payload_vel: &[],
    };
    let mut flags = ContactFlags::default();
    for c in model.robot_contacts(&k) {
        flags.add(&c);
    }
    flags
}

/// Total mechanical energy of the body: kinetic plus gravitational.
pub fn mechanical_energy(state: &SimState, robot: &RobotParams, world: &WorldModel) -> f64 {
    let m = state.suspended_mass(robot, world);
    let i_body = composite_inertia(state, robot, world);
    let r = state.body.orientation.to_rotation_matrix();
    let i_world = r.matrix() * i_body * r.matrix().transpose();
    let w = state.body.angular_velocity;
    0.5 * m * state.body.linear_velocity.norm_squared() + 0.5 * w.dot(&(i_world * w))
        - m * world.gravity.dot(&state.body.position)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn idle(robot: &RobotParams) -> Actuation {
        Actuation::idle(robot, LegPose::default())
    }

    #[test]
    fn free_fall_matches_ballistics() {
        let robot = RobotParams::default();
        let world = WorldModel::default();
        let params = SimParams::default();
        let body = BodyState::at_rest(Vec3::new(0.0, 0.0, 10.0), UnitQuaternion::identity());
        let mut s = SimState::new(body, LegJointState::default(), &robot, &world);
        for _ in 0..1000 {
            step(&mut s, &idle(&robot), &world, &robot, &params, 1e-3).unwrap();
        }
        assert_relative_eq!(s.time, 1.0, epsilon = 1e-9);
        assert!((s.body.position.z - (10.0 - 0.5 * 9.81)).abs() < 1e-3);
    }

    #[test]
    fn attach_detach_round_trip() {
        let robot = RobotParams::default();
        let world = WorldModel::default();
        let mut s = SimState::new(
            BodyState::default(),
            LegJointState::default(),
            &robot,
            &world,
        );
        let before = s.clone();
        attach_wire(&mut s, &robot, 4, Vec3::new(-0.09, 0.0, 2.0)).unwrap();
        assert_relative_eq!(s.wires[4].length, 2.0, epsilon = 1e-12);
        assert_eq!(
            attach_wire(&mut s, &robot, 4, Vec3::zeros()),
            Err(SimError::AlreadyAttached { index: 4 })
        );
        detach_wire(&mut s, 4).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn suspended_body_has_no_contacts() {
        let robot = RobotParams::default();
        let world = WorldModel {
            terrain: vec![TerrainPatch::horizontal([-5.0, 5.0], [-5.0, 5.0], 0.0, 0.8)],
            ..WorldModel::default()
        };
        let body = BodyState::at_rest(Vec3::new(0.0, 0.0, 1.0), UnitQuaternion::identity());
        let s = SimState::new(body, LegJointState::default(), &robot, &world);
        let flags = contact_flags(&s, &world, &robot, &SimParams::default());
        assert_eq!(flags.total(), 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        let robot = RobotParams::default();
        let world = WorldModel::default();
        let mut s = SimState::new(
            BodyState::default(),
            LegJointState::default(),
            &robot,
            &world,
        );
        let err = step(
            &mut s,
            &idle(&robot),
            &world,
            &robot,
            &SimParams::default(),
            0.02,
        )
        .unwrap_err();
        assert!(matches!(err, SimError::InvalidStep { .. }));
    }

    #[test]
    fn winch_sticks_inside_band() {
        let p = SimParams::default();
        // 1 mm stretch = 100 N, motor 100 N, friction 5 N: stays put.
        let (rate, t) = winch_response(1e-3, 0.0, 100.0, 5.0, 0.4, &p);
        assert_eq!(rate, 0.0);
        assert_relative_eq!(t, 100.0, epsilon = 1e-9);
        // Pulled harder than motor + friction: pays out, tension at the band edge.
        let (rate, t) = winch_response(2e-3, 0.0, 100.0, 5.0, 0.4, &p);
        assert!(rate > 0.0);
        assert_relative_eq!(t, 105.0, epsilon = 1e-9);
        // Slack wire with enough current winds in.
        let (rate, t) = winch_response(-1e-3, 0.0, 100.0, 5.0, 0.4, &p);
        assert!(rate < 0.0);
        assert_eq!(t, 0.0);
    }
}
