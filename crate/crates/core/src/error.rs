use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("wire origin and anchor coincide (length {length:.3e} m)")]
    DegenerateWire { length: f64 },
    #[error("no wires attached")]
    NoWires,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensionError {
    #[error("tension limits invalid at wire {index}: need 0 <= f_min < f_max, got [{min}, {max}]")]
    InvalidLimits { index: usize, min: f64, max: f64 },
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(
        "tension QP did not converge in {iterations} iterations (projected gradient {pg_norm:.3e})"
    )]
    SolverNotConverged { iterations: usize, pg_norm: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("gravity term was computed at a different pose (off by {offset:.3e})")]
    StaleJacobian { offset: f64 },
    #[error("identified load friction is negative at wire {index} ({value:.6} A)")]
    NegativeFriction { index: usize, value: f64 },
    #[error("invalid winch measurement at wire {index}: {reason}")]
    InvalidMeasurement { index: usize, reason: String },
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Tension(#[from] TensionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum LegSide {
    #[error("left")]
    Left,
    #[error("right")]
    Right,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LegError {
    #[error("{side} leg cannot reach target (arm distance {distance:.4} m, reachable ({min:.4}, {max:.4}))")]
    Unreachable {
        side: LegSide,
        distance: f64,
        min: f64,
        max: f64,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("simulation diverged at t={time:.4} s (|q̇| = {speed:.3e})")]
    NumericalDivergence { time: f64, speed: f64 },
    #[error("wire {index} is already attached")]
    AlreadyAttached { index: usize },
    #[error("wire {index} is not attached")]
    NotAttached { index: usize },
    #[error("wire index {index} out of range ({count} wires)")]
    NoSuchWire { index: usize, count: usize },
    #[error("time step {dt} outside (0, 0.01]")]
    InvalidStep { dt: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuardReason {
    #[error("insufficient wires: {attached} attached, {required} required")]
    InsufficientWires { required: usize, attached: usize },
    #[error("ground contact ({force:.2} N on a wheel)")]
    GroundContact { force: f64 },
    #[error("gravity wrench infeasible at the current pose (residual {residual:.3e} N)")]
    InfeasibleWrench { residual: f64 },
    #[error("{leg} requires CogVelocity wire mode")]
    RequiresSuspension { leg: &'static str },
    #[error("{0}")]
    Geometry(GeometryError),
    #[error("{0}")]
    Tension(TensionError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModeError {
    #[error("transition rejected: {0}")]
    GuardFailed(GuardReason),
}
