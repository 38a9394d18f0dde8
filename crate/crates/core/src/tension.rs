//! Gravity-compensation tension distribution.
//!
//! Solves
//!
//! ```text
//! min_f  ‖W f − w‖² + λ‖f‖²    s.t.  f_min ≤ f ≤ f_max
//! ```
//!
//! with a primal active-set method on the box. Each iteration solves the
//! reduced normal equations on the free set; bounds are added when a step
//! would leave the box and released when their multiplier has the wrong
//! sign. A projected-gradient polish takes over if rounding leaves the
//! active-set result short of the tolerance.

use nalgebra::{DMatrix, DVector, Matrix6xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::TensionError;
use crate::geometry::{PoseStamp, Vec3, WireJacobian, Wrench};

/// Per-wire tension box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensionLimits {
    pub f_min: DVector<f64>,
    pub f_max: DVector<f64>,
}

impl TensionLimits {
    pub fn new(f_min: DVector<f64>, f_max: DVector<f64>) -> Result<Self, TensionError> {
        let limits = Self { f_min, f_max };
        limits.validate()?;
        Ok(limits)
    }

    pub fn uniform(m: usize, f_min: f64, f_max: f64) -> Result<Self, TensionError> {
        Self::new(
            DVector::from_element(m, f_min),
            DVector::from_element(m, f_max),
        )
    }

    pub fn len(&self) -> usize {
        self.f_min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_min.is_empty()
    }

    pub fn validate(&self) -> Result<(), TensionError> {
        if self.f_min.len() != self.f_max.len() {
            return Err(TensionError::Dimension {
                what: "f_max",
                got: self.f_max.len(),
                expected: self.f_min.len(),
            });
        }
        for i in 0..self.f_min.len() {
            let (lo, hi) = (self.f_min[i], self.f_max[i]);
            if !(lo >= 0.0 && lo < hi) {
                return Err(TensionError::InvalidLimits {
                    index: i,
                    min: lo,
                    max: hi,
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, f: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            f.len(),
            f.iter()
                .enumerate()
                .map(|(i, v)| v.clamp(self.f_min[i], self.f_max[i])),
        )
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.f_min + &self.f_max) * 0.5
    }

    pub fn contains(&self, f: &DVector<f64>) -> bool {
        f.len() == self.len()
            && f.iter()
                .enumerate()
                .all(|(i, v)| *v >= self.f_min[i] && *v <= self.f_max[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpOptions {
    pub regularization: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the projected-gradient norm.
    pub tolerance: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            regularization: 1e-3,
            max_iterations: 10_000,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensionSolution {
    pub tensions: DVector<f64>,
    /// `W f − w` at the returned tensions.
    pub residual_wrench: Wrench,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub pg_norm: f64,
    /// Pose of the Jacobian the solution was computed from.
    pub pose: PoseStamp,
}

impl TensionSolution {
    /// Turns a non-converged solution into `SolverNotConverged`.
    pub fn check(&self) -> Result<&Self, TensionError> {
        if self.converged {
            Ok(self)
        } else {
            Err(TensionError::SolverNotConverged {
                iterations: self.iterations,
                pg_norm: self.pg_norm,
            })
        }
    }

    pub fn residual_force(&self) -> Vec3 {
        self.residual_wrench.fixed_rows::<3>(0).into_owned()
    }
}

/// The wrench the wires must exert to hold `mass` against `gravity`.
pub fn gravity_wrench(mass: f64, gravity: &Vec3) -> Wrench {
    let mut w = Wrench::zeros();
    w.fixed_rows_mut::<3>(0).copy_from(&(-mass * gravity));
    w
}

/// `‖W f − w‖² + λ‖f‖²`.
pub fn objective(
    jac: &Matrix6xX<f64>,
    target: &Wrench,
    regularization: f64,
    f: &DVector<f64>,
) -> f64 {
    (jac * f - target).norm_squared() + regularization * f.norm_squared()
}

/// Gradient of [`objective`] with respect to `f`.
pub fn objective_gradient(
    jac: &Matrix6xX<f64>,
    target: &Wrench,
    regularization: f64,
    f: &DVector<f64>,
) -> DVector<f64> {
    (jac.transpose() * (jac * f - target) + f * regularization) * 2.0
}

/// Worst violation of the box-QP optimality conditions at `f`: the
/// gradient must be `≥ 0` at a lower bound, `≤ 0` at an upper bound and
/// zero in the interior.
pub fn kkt_violation(
    jac: &Matrix6xX<f64>,
    target: &Wrench,
    limits: &TensionLimits,
    regularization: f64,
    f: &DVector<f64>,
) -> f64 {
    let g = objective_gradient(jac, target, regularization, f);
    projected_gradient(&g, f, limits).amax()
}

fn projected_gradient(g: &DVector<f64>, f: &DVector<f64>, limits: &TensionLimits) -> DVector<f64> {
    DVector::from_iterator(
        g.len(),
        (0..g.len()).map(|i| {
            if f[i] <= limits.f_min[i] {
                g[i].min(0.0)
            } else if f[i] >= limits.f_max[i] {
                g[i].max(0.0)
            } else {
                g[i]
            }
        }),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

pub fn solve_tension_qp(
    jac: &WireJacobian,
    target: &Wrench,
    limits: &TensionLimits,
    options: &QpOptions,
) -> Result<TensionSolution, TensionError> {
    let m = jac.wire_count();
    limits.validate()?;
    if limits.len() != m {
        return Err(TensionError::Dimension {
            what: "tension limits",
            got: limits.len(),
            expected: m,
        });
    }
    let w = jac.matrix();
    let lambda = options.regularization.max(0.0);
    // Q f = c are the normal equations of the unconstrained problem.
    let q: DMatrix<f64> = w.transpose() * w + DMatrix::identity(m, m) * lambda;
    let c: DVector<f64> = w.transpose() * target;

    let mut f = limits.midpoint();
    let mut state = vec![Bound::Free; m];
    let mut iterations = 0;
    let mut pg_norm = f64::INFINITY;

    while iterations < options.max_iterations {
        iterations += 1;
        let candidate = solve_free_subproblem(&q, &c, &f, &state);
        let step_limit = max_feasible_step(&f, &candidate, &state, limits);
        match step_limit {
            None => {
                for i in 0..m {
                    if state[i] == Bound::Free {
                        f[i] = candidate[i];
                    }
                }
                let g = (&q * &f - &c) * 2.0;
                pg_norm = projected_gradient(&g, &f, limits).norm();
                // Release the bound whose multiplier is most wrong-signed.
                let mut worst: Option<(usize, f64)> = None;
                for i in 0..m {
                    let violation = match state[i] {
                        Bound::Lower => -g[i],
                        Bound::Upper => g[i],
                        Bound::Free => 0.0,
                    };
                    if violation > options.tolerance * 0.1
                        && worst.is_none_or(|(_, v)| violation > v)
                    {
                        worst = Some((i, violation));
                    }
                }
                match worst {
                    Some((i, _)) => state[i] = Bound::Free,
                    None => break,
                }
            }
            Some((alpha, blocking)) => {
                for i in 0..m {
                    if state[i] == Bound::Free {
                        f[i] += alpha * (candidate[i] - f[i]);
                    }
                }
                let (i, b) = blocking;
                state[i] = b;
                f[i] = match b {
                    Bound::Lower => limits.f_min[i],
                    _ => limits.f_max[i],
                };
            }
        }
    }

    if pg_norm >= options.tolerance {
        pg_norm = polish(&q, &c, &mut f, limits, options, &mut iterations);
    }

    let residual_wrench = w * &f - target;
    Ok(TensionSolution {
        objective: residual_wrench.norm_squared() + lambda * f.norm_squared(),
        residual_wrench,
        converged: pg_norm < options.tolerance,
        iterations,
        pg_norm,
        tensions: f,
        pose: *jac.pose(),
    })
}

/// Minimizes the quadratic over the free variables with the others held at
/// their current (bound) values. Falls back to a least-squares solve when
/// the reduced Hessian is singular (redundant layouts with λ = 0).
fn solve_free_subproblem(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    f: &DVector<f64>,
    state: &[Bound],
) -> DVector<f64> {
    let free: Vec<usize> = (0..f.len()).filter(|&i| state[i] == Bound::Free).collect();
    let mut out = f.clone();
    if free.is_empty() {
        return out;
    }
    let n = free.len();
    let mut qff = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for (a, &i) in free.iter().enumerate() {
        let mut r = c[i];
        for j in 0..f.len() {
            if state[j] != Bound::Free {
                r -= q[(i, j)] * f[j];
            }
        }
        rhs[a] = r;
        for (b, &j) in free.iter().enumerate() {
            qff[(a, b)] = q[(i, j)];
        }
    }
    let x = match qff.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            let svd = qff.svd(true, true);
            let eps = svd.singular_values.max() * 1e-12;
            svd.solve(&rhs, eps).unwrap_or_else(|_| DVector::zeros(n))
        }
    };
    for (a, &i) in free.iter().enumerate() {
        out[i] = x[a];
    }
    out
}

/// Largest `α ∈ [0, 1)` for which `f + α (candidate − f)` stays in the box,
/// together with the first bound hit; `None` if the full step is feasible.
fn max_feasible_step(
    f: &DVector<f64>,
    candidate: &DVector<f64>,
    state: &[Bound],
    limits: &TensionLimits,
) -> Option<(f64, (usize, Bound))> {
    let mut best: Option<(f64, (usize, Bound))> = None;
    for i in 0..f.len() {
        if state[i] != Bound::Free {
            continue;
        }
        let d = candidate[i] - f[i];
        let hit = if candidate[i] < limits.f_min[i] {
            Some(((limits.f_min[i] - f[i]) / d, Bound::Lower))
        } else if candidate[i] > limits.f_max[i] {
            Some(((limits.f_max[i] - f[i]) / d, Bound::Upper))
        } else {
            None
        };
        if let Some((alpha, b)) = hit {
            let alpha = alpha.clamp(0.0, 1.0);
            if best.is_none_or(|(a, _)| alpha < a) {
                best = Some((alpha, (i, b)));
            }
        }
    }
    best
}

/// Projected-gradient iterations with a `1/L` step. Returns the final
/// projected-gradient norm.
fn polish(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    f: &mut DVector<f64>,
    limits: &TensionLimits,
    options: &QpOptions,
    iterations: &mut usize,
) -> f64 {
    let lipschitz = 2.0 * q.clone().symmetric_eigenvalues().amax().max(1e-300);
    let step = 1.0 / lipschitz;
    loop {
        let g = (q * &*f - c) * 2.0;
        let pg = projected_gradient(&g, f, limits).norm();
        if pg < options.tolerance || *iterations >= options.max_iterations {
            return pg;
        }
        *iterations += 1;
        *f = limits.clamp(&(&*f - g * step));
    }
}

/// Outcome of a point feasibility query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// Norm of the best achievable residual force, newtons.
    pub residual_norm: f64,
}

/// Whether the force part of `target` can be produced within the tension
/// box. Moments are ignored; the check solves the force-only box QP with
/// no regularization and compares the residual force norm against `tol`.
pub fn wrench_feasible(
    jac: &WireJacobian,
    target: &Wrench,
    limits: &TensionLimits,
    tol: f64,
) -> Result<Feasibility, TensionError> {
    let mut force_rows = jac.matrix().clone();
    force_rows.fixed_rows_mut::<3>(3).fill(0.0);
    let mut force_target = *target;
    force_target.fixed_rows_mut::<3>(3).fill(0.0);
    let reduced = WireJacobian::from_columns(force_rows);
    let sol = solve_tension_qp(
        &reduced,
        &force_target,
        limits,
        &QpOptions {
            regularization: 0.0,
            ..QpOptions::default()
        },
    )?;
    let residual_norm = Vector3::from(sol.residual_force()).norm();
    Ok(Feasibility {
        feasible: residual_norm < tol,
        residual_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_jacobian, BodyState, WireGeometry};
    use approx::assert_relative_eq;

    fn vertical(attach_y: f64) -> WireGeometry {
        WireGeometry {
            body_attach: Vec3::new(0.0, attach_y, 0.0),
            anchor: Vec3::new(0.0, attach_y, 2.0),
        }
    }

    #[test]
    fn gravity_wrench_examples() {
        let g = Vec3::new(0.0, 0.0, -9.81);
        assert_relative_eq!(
            gravity_wrench(10.0, &g),
            Wrench::new(0.0, 0.0, 98.1, 0.0, 0.0, 0.0)
        );
        assert_eq!(gravity_wrench(0.0, &g), Wrench::zeros());
        assert_relative_eq!(
            gravity_wrench(12.0, &g),
            Wrench::new(0.0, 0.0, 117.72, 0.0, 0.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn symmetric_pair_shares_load() {
        let body = BodyState::default();
        let jac = build_jacobian(&body, &[vertical(0.09), vertical(-0.09)]).unwrap();
        let w = gravity_wrench(10.0, &Vec3::new(0.0, 0.0, -9.81));
        let limits = TensionLimits::uniform(2, 0.0, 1000.0).unwrap();
        let opts = QpOptions {
            regularization: 0.0,
            ..QpOptions::default()
        };
        let sol = solve_tension_qp(&jac, &w, &limits, &opts).unwrap();
        assert!(sol.converged);
        assert_relative_eq!(sol.tensions[0], 49.05, epsilon = 1e-9);
        assert_relative_eq!(sol.tensions[1], 49.05, epsilon = 1e-9);
    }

    #[test]
    fn single_wire_is_exactly_determined() {
        let jac = build_jacobian(&BodyState::default(), &[vertical(0.0)]).unwrap();
        let w = gravity_wrench(10.0, &Vec3::new(0.0, 0.0, -9.81));
        let limits = TensionLimits::uniform(1, 2.0, 120.0).unwrap();
        let opts = QpOptions {
            regularization: 0.0,
            ..QpOptions::default()
        };
        let sol = solve_tension_qp(&jac, &w, &limits, &opts).unwrap();
        assert_relative_eq!(sol.tensions[0], 98.1, epsilon = 1e-9);
        assert!(sol.residual_wrench.norm() < 1e-8);
    }

    #[test]
    fn saturates_at_upper_bound() {
        let jac = build_jacobian(&BodyState::default(), &[vertical(0.0)]).unwrap();
        let w = gravity_wrench(20.0, &Vec3::new(0.0, 0.0, -9.81));
        let limits = TensionLimits::uniform(1, 2.0, 120.0).unwrap();
        let sol = solve_tension_qp(&jac, &w, &limits, &QpOptions::default()).unwrap();
        assert_eq!(sol.tensions[0], 120.0);
        assert!(sol.converged);
        assert_relative_eq!(sol.residual_wrench[2], 120.0 - 196.2, epsilon = 1e-9);
    }

    #[test]
    fn invalid_limits_rejected() {
        assert!(matches!(
            TensionLimits::uniform(2, 5.0, 5.0),
            Err(TensionError::InvalidLimits { .. })
        ));
        assert!(TensionLimits::uniform(1, -1.0, 5.0).is_err());
    }

    #[test]
    fn limits_length_must_match_wires() {
        let jac = build_jacobian(&BodyState::default(), &[vertical(0.0)]).unwrap();
        let limits = TensionLimits::uniform(2, 0.0, 1.0).unwrap();
        assert!(matches!(
            solve_tension_qp(&jac, &Wrench::zeros(), &limits, &QpOptions::default()),
            Err(TensionError::Dimension { .. })
        ));
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let body = BodyState::default();
        let jac = build_jacobian(&body, &[vertical(0.09), vertical(-0.09)]).unwrap();
        let w = gravity_wrench(10.0, &Vec3::new(0.0, 0.0, -9.81));
        let limits = TensionLimits::uniform(2, 2.0, 120.0).unwrap();
        let sol = solve_tension_qp(
            &jac,
            &w,
            &limits,
            &QpOptions {
                max_iterations: 0,
                ..QpOptions::default()
            },
        )
        .unwrap();
        assert!(!sol.converged);
        assert!(limits.contains(&sol.tensions));
        assert!(matches!(
            sol.check(),
            Err(TensionError::SolverNotConverged { .. })
        ));
    }

    #[test]
    fn vertical_wire_feasibility() {
        let jac = build_jacobian(&BodyState::default(), &[vertical(0.0)]).unwrap();
        let limits = TensionLimits::uniform(1, 2.0, 120.0).unwrap();
        let up = Wrench::new(0.0, 0.0, 50.0, 0.0, 0.0, 0.0);
        let f = wrench_feasible(&jac, &up, &limits, 1e-6).unwrap();
        assert!(f.feasible);
        assert!(f.residual_norm < 1e-9);

        let lateral = Wrench::new(3.0, 4.0, 50.0, 0.0, 0.0, 0.0);
        let f = wrench_feasible(&jac, &lateral, &limits, 1e-6).unwrap();
        assert!(!f.feasible);
        assert_relative_eq!(f.residual_norm, 5.0, epsilon = 1e-9);
    }
}
