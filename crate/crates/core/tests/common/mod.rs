//! Independent oracles and the checks built on them. Shared by the
//! acceptance runner and the oracle tests.

#![allow(dead_code)]

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix6xX, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wireleg::error::{LegError, LegSide};
use wireleg::geometry::{build_jacobian, wire_rates, BodyState, WireGeometry, WireJacobian};
use wireleg::leg::{planar_fk, two_link_ik, LegParams};
use wireleg::scenario::{bundled, bundled_names, log::LogTable, run_scenario, ScenarioScript};
use wireleg::tension::{kkt_violation, solve_tension_qp, QpOptions, TensionLimits};
use wireleg::wire_control::{
    identify_winch, synthesize_measurements, wire_velocity_tensions, ControllerGains, WinchModel,
};

pub type Check = Result<String, String>;

pub const F_MIN: f64 = 5.0;
pub const F_MAX: f64 = 120.0;
pub const LAMBDA: f64 = 1e-3;
pub const G: f64 = 9.81;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_body(rng: &mut ChaCha8Rng) -> BodyState {
    let axis = unit(rng);
    let mut body = BodyState::at_rest(
        Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(0.5..1.5),
        ),
        UnitQuaternion::from_scaled_axis(axis * rng.random_range(-3.0..3.0)),
    );
    body.linear_velocity = unit(rng) * rng.random_range(0.0..1.0);
    body.angular_velocity = unit(rng) * rng.random_range(0.0..2.0);
    body
}

/// `m` wires leaving a 0.1 m half-extent body toward anchors 2 to 3 m up.
pub fn random_wires(rng: &mut ChaCha8Rng, m: usize) -> Vec<WireGeometry> {
    (0..m)
        .map(|_| WireGeometry {
            body_attach: Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ),
            anchor: Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(2.5..3.5),
            ),
        })
        .collect()
}

/// Wire length straight from the pose, no shared code with the library.
pub fn length_oracle(
    position: &Vector3<f64>,
    orientation: &UnitQuaternion<f64>,
    w: &WireGeometry,
) -> f64 {
    let attach = position + orientation.to_rotation_matrix().matrix() * w.body_attach;
    (w.anchor - attach).norm()
}

/// `[s; r × s]` columns computed from the pose.
pub fn jacobian_oracle(body: &BodyState, wires: &[WireGeometry]) -> Matrix6xX<f64> {
    let rot = body.orientation.to_rotation_matrix();
    let mut w = Matrix6xX::zeros(wires.len());
    for (i, g) in wires.iter().enumerate() {
        let r = rot.matrix() * g.body_attach;
        let d = g.anchor - body.position - r;
        let s = d / d.norm();
        let m = r.cross(&s);
        for k in 0..3 {
            w[(k, i)] = s[k];
            w[(k + 3, i)] = m[k];
        }
    }
    w
}

/// Length rates by central differences along the body twist, with the
/// rotation applied in the world frame.
pub fn rate_oracle(body: &BodyState, wires: &[WireGeometry], h: f64) -> DVector<f64> {
    let pose = |t: f64| {
        let p = body.position + body.linear_velocity * t;
        let q = UnitQuaternion::from_scaled_axis(body.angular_velocity * t) * body.orientation;
        (p, q)
    };
    let (p_plus, q_plus) = pose(h);
    let (p_minus, q_minus) = pose(-h);
    DVector::from_iterator(
        wires.len(),
        wires.iter().map(|w| {
            (length_oracle(&p_plus, &q_plus, w) - length_oracle(&p_minus, &q_minus, w)) / (2.0 * h)
        }),
    )
}

fn oracle_objective(w: &Matrix6xX<f64>, target: &Vector6<f64>, f: &DVector<f64>) -> f64 {
    (w * f - target).norm_squared() + LAMBDA * f.norm_squared()
}

/// Projected gradient with a fixed `1/L` step and Nesterov momentum,
/// restarted whenever the objective rises.
pub fn pg_oracle(w: &Matrix6xX<f64>, target: &Vector6<f64>, lo: f64, hi: f64) -> DVector<f64> {
    let m = w.ncols();
    let q: DMatrix<f64> = (w.transpose() * w + DMatrix::identity(m, m) * LAMBDA) * 2.0;
    let c: DVector<f64> = w.transpose() * target * 2.0;
    let lipschitz = q.clone().symmetric_eigenvalues().max();
    let step = 1.0 / lipschitz;
    let project = |v: DVector<f64>| v.map(|x| x.clamp(lo, hi));
    let mut f = DVector::from_element(m, 0.5 * (lo + hi));
    let mut y = f.clone();
    let mut t = 1.0_f64;
    let mut last = oracle_objective(w, target, &f);
    for _ in 0..200_000 {
        let grad = &q * &y - &c;
        let next = project(&y - grad * step);
        let value = oracle_objective(w, target, &next);
        if value > last {
            y = f.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &f) * ((t - 1.0) / t_next);
        let moved = (&next - &f).amax();
        f = next;
        t = t_next;
        last = value;
        if moved < 1e-15 {
            break;
        }
    }
    f
}

pub struct QpCase {
    pub jacobian: WireJacobian,
    pub oracle_matrix: Matrix6xX<f64>,
    pub target: Vector6<f64>,
}

/// Random layouts, one to four wires, each with a gravity-plus-disturbance
/// target wrench.
pub fn qp_cases(seed: u64, n: usize) -> Vec<QpCase> {
    let mut r = rng(seed);
    (0..n)
        .map(|k| {
            let m = k % 4 + 1;
            let body = random_body(&mut r);
            let wires = random_wires(&mut r, m);
            let jacobian = build_jacobian(&body, &wires).expect("non-degenerate layout");
            let mut target = Vector6::zeros();
            target[2] = r.random_range(1.0..6.0) * G;
            for i in 0..6 {
                target[i] += r.random_range(-3.0..3.0);
            }
            QpCase {
                jacobian,
                oracle_matrix: jacobian_oracle(&body, &wires),
                target,
            }
        })
        .collect()
}

pub fn check_qp_oracle() -> Check {
    let cases = qp_cases(0x51ab, 100);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (k, c) in cases.iter().enumerate() {
        let m = c.jacobian.wire_count();
        let limits = TensionLimits::uniform(m, F_MIN, F_MAX).unwrap();
        let sol = solve_tension_qp(&c.jacobian, &c.target, &limits, &QpOptions::default())
            .map_err(|e| format!("layout {k}: {e}"))?;
        let reference = pg_oracle(&c.oracle_matrix, &c.target, F_MIN, F_MAX);
        let ours = oracle_objective(&c.oracle_matrix, &c.target, &sol.tensions);
        let theirs = oracle_objective(&c.oracle_matrix, &c.target, &reference);
        let gap = (ours - theirs).abs();
        worst = worst.max(gap);
        if gap > 1e-6 {
            return Err(format!(
                "layout {k} (m={m}): objective {ours} vs oracle {theirs}"
            ));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= 5.0 {
        return Err(format!("took {elapsed:.2} s"));
    }
    Ok(format!(
        "100 layouts, max objective gap {worst:.2e}, {elapsed:.2} s"
    ))
}

pub fn check_kkt() -> Check {
    let cases = qp_cases(0x6b6b, 1000);
    let mut worst: f64 = 0.0;
    let mut converged = 0;
    for (k, c) in cases.iter().enumerate() {
        let m = c.jacobian.wire_count();
        let limits = TensionLimits::uniform(m, F_MIN, F_MAX).unwrap();
        let sol = solve_tension_qp(&c.jacobian, &c.target, &limits, &QpOptions::default())
            .map_err(|e| format!("layout {k}: {e}"))?;
        if !sol.converged {
            continue;
        }
        converged += 1;
        if !limits.contains(&sol.tensions) {
            return Err(format!("layout {k}: tensions leave the box"));
        }
        let v = kkt_violation(&c.oracle_matrix, &c.target, &limits, LAMBDA, &sol.tensions);
        worst = worst.max(v);
        if v > 1e-8 {
            return Err(format!("layout {k}: KKT violation {v:.2e}"));
        }
    }
    if converged == 0 {
        return Err("no converged solutions".into());
    }
    Ok(format!(
        "{converged}/1000 converged, max violation {worst:.2e}"
    ))
}

pub fn check_hover() -> Check {
    let script = bundled("hover").ok_or("hover scenario missing")?;
    let start = Instant::now();
    let report = run_scenario(&script, &[]).map_err(|e| e.to_string())?;
    let wall = start.elapsed().as_secs_f64();
    let duration = report.samples.last().map(|s| s.time).unwrap_or(0.0);
    if duration < 10.0 - 1e-9 {
        return Err(format!("ran only {duration} s"));
    }
    let origin = report.samples[0].position;
    let drift = report
        .samples
        .iter()
        .map(|s| (s.position - origin).norm())
        .fold(0.0, f64::max);
    let min_tension = report
        .samples
        .iter()
        .flat_map(|s| s.wires.iter().filter(|w| w.attached).map(|w| w.tension))
        .fold(f64::INFINITY, f64::min);
    let detail = format!(
        "drift {:.3} mm, min tension {min_tension:.2} N, wall {wall:.2} s",
        drift * 1e3
    );
    if drift < 1e-3 && min_tension >= 0.0 && wall < 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn check_jacobian() -> Check {
    let mut r = rng(0x1ac0);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let m = k % 4 + 1;
        let body = random_body(&mut r);
        let wires = random_wires(&mut r, m);
        let jac = build_jacobian(&body, &wires).map_err(|e| e.to_string())?;
        let analytic = wire_rates(&body, &jac);
        let numeric = rate_oracle(&body, &wires, 1e-5);
        worst = worst.max((analytic - numeric).amax());
    }
    if worst < 1e-6 {
        Ok(format!("1000 states, max error {worst:.2e} m/s"))
    } else {
        Err(format!("max error {worst:.2e} m/s"))
    }
}

pub fn check_ik() -> Check {
    let mut r = rng(0x1c);
    let params = LegParams {
        thigh_length: 0.26,
        calf_length: 0.2,
        ..LegParams::default()
    };
    let (min, max) = params.reach();
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let dist = r.random_range(min + 1e-6..max - 1e-6);
        let angle = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let target = Vector2::new(dist * angle.cos(), dist * angle.sin());
        let side = if k % 2 == 0 {
            LegSide::Left
        } else {
            LegSide::Right
        };
        let a = two_link_ik(&target, &params, side).map_err(|e| format!("target {k}: {e}"))?;
        worst = worst.max((planar_fk(a.hip_pitch, a.knee_pitch, &params) - target).norm());
    }
    if worst >= 1e-9 {
        return Err(format!("max round-trip error {worst:.2e} m"));
    }
    let mut rejected = 0;
    for k in 0..1000 {
        let dist = if k % 2 == 0 {
            r.random_range(0.0..min * (1.0 - 1e-6))
        } else {
            r.random_range(max * (1.0 + 1e-6)..2.0 * max)
        };
        let angle = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let target = Vector2::new(dist * angle.cos(), dist * angle.sin());
        match two_link_ik(&target, &params, LegSide::Left) {
            Err(LegError::Unreachable { .. }) => rejected += 1,
            other => {
                return Err(format!(
                    "distance {dist}: expected Unreachable, got {other:?}"
                ))
            }
        }
    }
    Ok(format!(
        "max round-trip error {worst:.2e} m, {rejected} outside targets rejected"
    ))
}

pub fn random_winch(r: &mut ChaCha8Rng, m: usize) -> WinchModel {
    WinchModel {
        radius: r.random_range(0.005..0.02),
        torque_constants: DVector::from_fn(m, |_, _| r.random_range(0.05..0.5)),
        coulomb_current: DVector::from_fn(m, |_, _| r.random_range(0.0..0.5)),
        load_friction: DVector::from_fn(m, |_, _| r.random_range(0.0..0.5)),
        load_norm: Default::default(),
    }
}

pub fn check_winch_id() -> Check {
    let mut r = rng(0x1d);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let m = r.random_range(1..5);
        let truth = random_winch(&mut r, m);
        let mass = r.random_range(1.0..8.0);
        let meas = synthesize_measurements(&truth, mass, G);
        let got = identify_winch(&meas, mass, G, truth.radius).map_err(|e| e.to_string())?;
        worst = worst
            .max((got.torque_constants - &truth.torque_constants).amax())
            .max((got.coulomb_current - &truth.coulomb_current).amax())
            .max((got.load_friction - &truth.load_friction).amax());
    }
    if worst < 1e-9 {
        Ok(format!("200 models, max parameter error {worst:.2e}"))
    } else {
        Err(format!("max parameter error {worst:.2e}"))
    }
}

/// Plateau height above the start ground: highest horizontal patch minus
/// the lowest.
fn cliff_height(script: &ScenarioScript) -> f64 {
    let heights: Vec<f64> = script
        .world
        .terrain
        .iter()
        .filter(|p| p.normal().z.abs() > 1.0 - 1e-9)
        .map(|p| p.origin.z)
        .collect();
    heights.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - heights.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub const ASCENT: (f64, f64) = (0.6, 15.0);

pub fn check_cliff() -> Check {
    let script = bundled("cliff_climb").ok_or("cliff_climb scenario missing")?;
    let report = run_scenario(&script, &[]).map_err(|e| e.to_string())?;
    let ascent: Vec<_> = report
        .samples
        .iter()
        .filter(|s| s.time >= ASCENT.0 && s.time <= ASCENT.1)
        .collect();
    for pair in ascent.windows(2) {
        for i in 0..2 {
            if pair[1].wires[i].length > pair[0].wires[i].length {
                return Err(format!("l{} grows at t={:.2}", i + 1, pair[1].time));
            }
        }
    }
    let slowest = report
        .samples
        .iter()
        .filter(|s| s.time >= 1.0 && s.time <= ASCENT.1)
        .flat_map(|s| s.wheels)
        .fold(f64::INFINITY, f64::min);
    if !(slowest > 0.0) {
        return Err(format!("wheel speed {slowest} during ascent"));
    }
    let height = cliff_height(&script);
    let first = report.samples.first().unwrap().position.z;
    let last = report.samples.last().unwrap().position.z;
    let gain = last - first;
    let detail =
        format!("gain {gain:.4} m for a {height:.3} m cliff, slowest wheel {slowest:.2} rad/s");
    if (gain - height).abs() <= 0.05 * height {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn check_equal_share() -> Check {
    let mut r = rng(0xe0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = r.random_range(1..5);
        let mass = r.random_range(1.0..8.0);
        let refs = DVector::from_fn(m, |_, _| r.random_range(-0.5..0.5));
        let limits = TensionLimits::uniform(m, 0.0, 1e4).unwrap();
        let f = wire_velocity_tensions(&refs, &refs, mass, G, &ControllerGains::default(), &limits)
            .map_err(|e| e.to_string())?;
        let weight = mass * G;
        worst = worst.max((f.sum() - weight).abs() / weight);
    }
    if worst <= 4.0 * f64::EPSILON {
        Ok(format!("1000 draws, max relative error {worst:.1e}"))
    } else {
        Err(format!("max relative error {worst:.2e}"))
    }
}

pub fn check_determinism() -> Check {
    let mut names = Vec::new();
    for name in bundled_names() {
        let script = bundled(name).ok_or("bundled scenario missing")?;
        let a = run_scenario(&script, &[]).map_err(|e| format!("{name}: {e}"))?;
        let b = run_scenario(&script, &[]).map_err(|e| format!("{name}: {e}"))?;
        if a.log.is_empty() || a.log != b.log {
            return Err(format!("{name}: logs differ"));
        }
        names.push(name);
    }
    Ok(format!("identical logs for {}", names.join(", ")))
}

/// RMS of `ldot − ldot_ref` on wires 1 and 2 over the cliff ascent.
pub fn ascent_rate_rms(control_rate: f64) -> Result<f64, String> {
    let script = bundled("cliff_climb").ok_or("cliff_climb scenario missing")?;
    let overrides = vec![("control.control_rate".to_string(), control_rate.to_string())];
    let report = run_scenario(&script, &overrides).map_err(|e| e.to_string())?;
    let table = LogTable::parse(&report.log).map_err(|e| e.to_string())?;
    let time = table.column("time").map_err(|e| e.to_string())?;
    let (mut sq, mut n) = (0.0, 0usize);
    for i in 1..=2 {
        let rate = table
            .column(&format!("ldot{i}"))
            .map_err(|e| e.to_string())?;
        let reference = table
            .column(&format!("ldot_ref{i}"))
            .map_err(|e| e.to_string())?;
        for k in 0..time.len() {
            if time[k] >= ASCENT.0 && time[k] <= ASCENT.1 {
                let e = rate[k] - reference[k];
                sq += e * e;
                n += 1;
            }
        }
    }
    Ok((sq / n as f64).sqrt())
}

pub fn check_oscillation() -> Check {
    let full = ascent_rate_rms(200.0)?;
    let half = ascent_rate_rms(100.0)?;
    let detail = format!("ascent rate error RMS {full:.6} m/s at 200 Hz, {half:.6} m/s at 100 Hz");
    if half > full {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub const CRITERIA: [(&str, fn() -> Check); 10] = [
    ("qp oracle equivalence", check_qp_oracle),
    ("kkt validity", check_kkt),
    ("static hover", check_hover),
    ("jacobian consistency", check_jacobian),
    ("ik round trip", check_ik),
    ("winch identification round trip", check_winch_id),
    ("cliff climb", check_cliff),
    ("equal share", check_equal_share),
    ("determinism", check_determinism),
    ("oscillation reproduction", check_oscillation),
];
