//! Wire-drive modes, tension to current mapping and winch identification.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::ControlError;
use crate::geometry::{BodyState, Twist, WireJacobian};
use crate::tension::{TensionLimits, TensionSolution};

/// Allowed pose mismatch between the gravity term and the current body.
pub const STALE_POSE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WireMode {
    #[default]
    Free,
    WireVelocity,
    CogVelocity,
}

impl WireMode {
    pub const ALL: [WireMode; 3] = [
        WireMode::Free,
        WireMode::WireVelocity,
        WireMode::CogVelocity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WireMode::Free => "Free",
            WireMode::WireVelocity => "WireVelocity",
            WireMode::CogVelocity => "CogVelocity",
        }
    }
}

/// Mode-tagged target for the wire controller.
#[derive(Clone, Debug, PartialEq)]
pub enum WireCommand {
    Free,
    /// Target wire rates `l̇ref`, one per attached wire.
    WireVelocity(DVector<f64>),
    /// Target body twist `q̇ref`.
    CogVelocity(Twist),
}

impl WireCommand {
    pub fn mode(&self) -> WireMode {
        match self {
            WireCommand::Free => WireMode::Free,
            WireCommand::WireVelocity(_) => WireMode::WireVelocity,
            WireCommand::CogVelocity(_) => WireMode::CogVelocity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    /// Wire-velocity mode gain, N per (m/s).
    pub kp_wire: f64,
    /// CoG-velocity mode gain, N per (m/s).
    pub kp_cog: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            kp_wire: 200.0,
            kp_cog: 200.0,
        }
    }
}

/// How the load-dependent friction term measures the load.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadNorm {
    /// Euclidean norm of the whole tension vector, shared by every winch.
    #[default]
    Euclidean,
    /// Each winch's own tension.
    PerWire,
}

/// Winch and motor parameters for the current mapping
/// `i = r Kt⁻¹ f + i₀ + i_L ‖f‖ / (M‖g‖)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinchModel {
    /// Winch drum radius, m.
    pub radius: f64,
    /// Torque constants, N·m/A.
    pub torque_constants: DVector<f64>,
    /// Coulomb friction compensation current, A.
    pub coulomb_current: DVector<f64>,
    /// Load-dependent friction coefficient, A.
    pub load_friction: DVector<f64>,
    #[serde(default)]
    pub load_norm: LoadNorm,
}

impl WinchModel {
    pub fn uniform(m: usize, radius: f64, kt: f64, i0: f64, il: f64) -> Self {
        Self {
            radius,
            torque_constants: DVector::from_element(m, kt),
            coulomb_current: DVector::from_element(m, i0),
            load_friction: DVector::from_element(m, il),
            load_norm: LoadNorm::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.torque_constants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.torque_constants.is_empty()
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let m = self.len();
        for (what, v) in [
            ("coulomb_current", &self.coulomb_current),
            ("load_friction", &self.load_friction),
        ] {
            if v.len() != m {
                return Err(ControlError::Dimension {
                    what,
                    got: v.len(),
                    expected: m,
                });
            }
        }
        for i in 0..m {
            let bad = !(self.radius > 0.0)
                || !(self.torque_constants[i] > 0.0)
                || self.coulomb_current[i] < 0.0
                || self.load_friction[i] < 0.0;
            if bad {
                return Err(ControlError::InvalidMeasurement {
                    index: i,
                    reason: "winch parameters need r > 0, Kt > 0, i0 >= 0, iL >= 0".into(),
                });
            }
        }
        Ok(())
    }

    /// Restricts the model to the given winch indices, in order.
    pub fn select(&self, indices: &[usize]) -> WinchModel {
        let pick =
            |v: &DVector<f64>| DVector::from_iterator(indices.len(), indices.iter().map(|&i| v[i]));
        WinchModel {
            radius: self.radius,
            torque_constants: pick(&self.torque_constants),
            coulomb_current: pick(&self.coulomb_current),
            load_friction: pick(&self.load_friction),
            load_norm: self.load_norm,
        }
    }

    /// Load measure per winch used by the friction term.
    pub fn load_measure(&self, tensions: &DVector<f64>) -> DVector<f64> {
        match self.load_norm {
            LoadNorm::Euclidean => DVector::from_element(tensions.len(), tensions.norm()),
            LoadNorm::PerWire => tensions.abs(),
        }
    }

    /// Friction expressed as current, given the load measure of one winch.
    pub fn friction_current(&self, i: usize, load: f64, weight: f64) -> f64 {
        self.coulomb_current[i] + self.load_friction[i] * load / weight
    }

    /// Converts a current into the equivalent frictionless wire force.
    pub fn force_per_amp(&self, i: usize) -> f64 {
        self.torque_constants[i] / self.radius
    }

    /// Tensions produced by `currents` while every winch winds in, i.e. the
    /// inverse of [`tension_to_current`].
    pub fn winding_tensions(
        &self,
        currents: &DVector<f64>,
        mass: f64,
        g_norm: f64,
    ) -> DVector<f64> {
        let weight = mass * g_norm;
        let m = currents.len();
        let at = |load: &DVector<f64>| {
            DVector::from_iterator(
                m,
                (0..m).map(|i| {
                    self.force_per_amp(i)
                        * (currents[i] - self.friction_current(i, load[i], weight))
                }),
            )
        };
        match self.load_norm {
            LoadNorm::PerWire => DVector::from_iterator(
                m,
                (0..m).map(|i| {
                    let k = self.force_per_amp(i);
                    let lf = self.load_friction[i] / weight;
                    // f = k (i − i0 − lf f), f ≥ 0
                    (k * (currents[i] - self.coulomb_current[i]) / (1.0 + k * lf)).max(0.0)
                }),
            ),
            LoadNorm::Euclidean => {
                // ‖f(N)‖ − N is strictly decreasing in the shared load N, so
                // bisection finds the unique fixed point.
                let residual = |n: f64| {
                    let f = at(&DVector::from_element(m, n));
                    f.map(|v| v.max(0.0)).norm() - n
                };
                let mut lo = 0.0;
                let mut hi = at(&DVector::zeros(m)).map(|v| v.max(0.0)).norm();
                if residual(lo) <= 0.0 {
                    return DVector::zeros(m);
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if residual(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= f64::EPSILON * hi.max(1.0) {
                        break;
                    }
                }
                at(&DVector::from_element(m, 0.5 * (lo + hi))).map(|v| v.max(0.0))
            }
        }
    }
}

/// Zero current on every winch.
pub fn free_mode(m: usize) -> DVector<f64> {
    DVector::zeros(m)
}

/// Equal-share gravity compensation plus a P term on wire velocity:
/// `fᵢ = M‖g‖/m + Kp (l̇ᵢ − l̇ᵢref)`, clamped to the limits.
pub fn wire_velocity_tensions(
    rates: &DVector<f64>,
    rates_ref: &DVector<f64>,
    mass: f64,
    g_norm: f64,
    gains: &ControllerGains,
    limits: &TensionLimits,
) -> Result<DVector<f64>, ControlError> {
    let m = rates.len();
    check_len("rates_ref", rates_ref.len(), m)?;
    check_len("tension limits", limits.len(), m)?;
    if m == 0 {
        return Ok(DVector::zeros(0));
    }
    let share = mass * g_norm / m as f64;
    let raw = (rates - rates_ref).map(|e| share + gains.kp_wire * e);
    Ok(limits.clamp(&raw))
}

/// `f = f^g + Kp (l̇ + Wᵀ q̇ref)`, clamped to the limits.
pub fn cog_velocity_tensions(
    body: &BodyState,
    jac: &WireJacobian,
    rates: &DVector<f64>,
    twist_ref: &Twist,
    gravity_term: &TensionSolution,
    gains: &ControllerGains,
    limits: &TensionLimits,
) -> Result<DVector<f64>, ControlError> {
    let here = body.pose_stamp();
    let offset = gravity_term
        .pose
        .distance(&here)
        .max(jac.pose().distance(&here));
    if offset > STALE_POSE_TOLERANCE {
        return Err(ControlError::StaleJacobian { offset });
    }
    let m = jac.wire_count();
    check_len("rates", rates.len(), m)?;
    check_len("gravity term", gravity_term.tensions.len(), m)?;
    check_len("tension limits", limits.len(), m)?;
    let tracking = rates + jac.matrix().transpose() * twist_ref;
    let raw = &gravity_term.tensions + tracking * gains.kp_cog;
    Ok(limits.clamp(&raw))
}

/// Friction-compensated current command for tensions `f_ref`.
pub fn tension_to_current(
    f_ref: &DVector<f64>,
    winch: &WinchModel,
    mass: f64,
    g_norm: f64,
) -> Result<DVector<f64>, ControlError> {
    let m = f_ref.len();
    check_len("winch model", winch.len(), m)?;
    let weight = mass * g_norm;
    let load = winch.load_measure(f_ref);
    Ok(DVector::from_iterator(
        m,
        (0..m).map(|i| {
            f_ref[i] / winch.force_per_amp(i) + winch.friction_current(i, load[i], weight)
        }),
    ))
}

/// Static current thresholds measured on one winch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinchMeasurements {
    /// Current at which the suspended robot starts to rise, A.
    pub i_up: DVector<f64>,
    /// Current at which the suspended robot starts to descend, A.
    pub i_down: DVector<f64>,
    /// No-load current at which the winch starts winding, A.
    pub i_0: DVector<f64>,
}

/// Recovers `(Kt, i₀, i_L)` from static thresholds. Friction is symmetric
/// about the gravity-balance current, so `i_mg = (i_up + i_down)/2`,
/// `i_L = (i_up − i_down)/2 − i₀` and `Kt = r M‖g‖ / i_mg`.
pub fn identify_winch(
    meas: &WinchMeasurements,
    mass: f64,
    g_norm: f64,
    radius: f64,
) -> Result<WinchModel, ControlError> {
    let m = meas.i_up.len();
    check_len("i_down", meas.i_down.len(), m)?;
    check_len("i_0", meas.i_0.len(), m)?;
    let weight = mass * g_norm;
    let mut kt = DVector::zeros(m);
    let mut il = DVector::zeros(m);
    for i in 0..m {
        let (up, down, i0) = (meas.i_up[i], meas.i_down[i], meas.i_0[i]);
        if up < down {
            return Err(ControlError::InvalidMeasurement {
                index: i,
                reason: format!("rise threshold {up} A below descend threshold {down} A"),
            });
        }
        if i0 < 0.0 {
            return Err(ControlError::InvalidMeasurement {
                index: i,
                reason: format!("negative no-load current {i0} A"),
            });
        }
        let i_mg = 0.5 * (up + down);
        if !(i_mg > 0.0) {
            return Err(ControlError::InvalidMeasurement {
                index: i,
                reason: format!("gravity-balance current {i_mg} A is not positive"),
            });
        }
        let load = 0.5 * (up - down) - i0;
        if load < 0.0 {
            return Err(ControlError::NegativeFriction {
                index: i,
                value: load,
            });
        }
        kt[i] = radius * weight / i_mg;
        il[i] = load;
    }
    Ok(WinchModel {
        radius,
        torque_constants: kt,
        coulomb_current: meas.i_0.clone(),
        load_friction: il,
        load_norm: LoadNorm::default(),
    })
}

/// The thresholds a winch following `model` would show in the single-wire
/// suspension test: `i_up/down = i_mg ± (i₀ + i_L)`.
pub fn synthesize_measurements(model: &WinchModel, mass: f64, g_norm: f64) -> WinchMeasurements {
    let m = model.len();
    let i_mg = DVector::from_iterator(
        m,
        (0..m).map(|i| model.radius * mass * g_norm / model.torque_constants[i]),
    );
    let friction = &model.coulomb_current + &model.load_friction;
    WinchMeasurements {
        i_up: &i_mg + &friction,
        i_down: &i_mg - &friction,
        i_0: model.coulomb_current.clone(),
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), ControlError> {
    if got != expected {
        Err(ControlError::Dimension {
            what,
            got,
            expected,
        })
    } else {
        Ok(())
    }
}
