//! Named checks evaluated over the sampled run.

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use crate::geometry::{Twist, Vec3};
use crate::leg::{LegMode, LegPose};
use crate::modes::SystemMode;
use crate::sim::{ContactFlags, RobotParams};
use crate::wire_control::WireMode;

use super::LegPreset;

#[derive(Clone, Debug, PartialEq)]
pub struct WireSample {
    pub attached: bool,
    pub length: f64,
    pub rate: f64,
    pub rate_ref: f64,
    pub tension: f64,
    pub tension_ref: f64,
    pub current: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PayloadSample {
    pub z: f64,
    pub grasped: bool,
}

/// Plant and controller state at one log instant.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub mode: SystemMode,
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
    pub linear_velocity: Vec3,
    pub angular_velocity: Vec3,
    pub twist_ref: Twist,
    pub wires: Vec<WireSample>,
    pub wheels: [f64; 2],
    pub pose: LegPose,
    pub contacts: ContactFlags,
    pub payloads: Vec<PayloadSample>,
}

fn inf() -> f64 {
    f64::INFINITY
}

/// Each check looks at samples with `from <= t <= to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// Largest CoG displacement from the first sample in the window, m.
    MaxDrift {
        tolerance: f64,
        #[serde(default)]
        from: f64,
        #[serde(default = "inf")]
        to: f64,
    },
    TensionsNonnegative {
        #[serde(default)]
        tolerance: f64,
        #[serde(default)]
        from: f64,
        #[serde(default = "inf")]
        to: f64,
    },
    /// Attached tensions stay below `f_max · (1 + tolerance)`.
    TensionsWithinLimits {
        #[serde(default)]
        tolerance: f64,
        #[serde(default)]
        from: f64,
        #[serde(default = "inf")]
        to: f64,
    },
    /// Paid-out lengths of the listed wires (1-based) never grow by more
    /// than `tolerance` between samples.
    LengthsNonincreasing {
        wires: Vec<usize>,
        #[serde(default)]
        tolerance: f64,
        #[serde(default)]
        from: f64,
        #[serde(default = "inf")]
        to: f64,
    },
    WheelSpeedsPositive {
        #[serde(default)]
        from: f64,
        #[serde(default = "inf")]
        to: f64,
    },
    /// CoG height change across the window equals `expected` within a
    /// relative tolerance.
    HeightGain {
        expected: f64,
        rel_tolerance: f64,
        #[serde(default)]
        from: f64,
        #[serde(default = "inf")]
        to: f64,
    },
    /// Payload (1-based) ends grasped and at least `min_height` above its
    /// start.
    PayloadLifted { payload: usize, min_height: f64 },
    FinalMode {
        wire_mode: WireMode,
        leg_mode: LegMode,
    },
    /// RMS of the CoG linear velocity error against its reference.
    SpeedTracking {
        max_rms: f64,
        #[serde(default)]
        from: f64,
        #[serde(default = "inf")]
        to: f64,
    },
    /// Joint angles at the end of the run.
    JointPose { pose: LegPreset, tolerance: f64 },
    NoBodyContact {
        #[serde(default)]
        from: f64,
        #[serde(default = "inf")]
        to: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssertionSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub check: Assertion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    pub fn kind(&self) -> &'static str {
        match self {
            Assertion::MaxDrift { .. } => "max_drift",
            Assertion::TensionsNonnegative { .. } => "tensions_nonnegative",
            Assertion::TensionsWithinLimits { .. } => "tensions_within_limits",
            Assertion::LengthsNonincreasing { .. } => "lengths_nonincreasing",
            Assertion::WheelSpeedsPositive { .. } => "wheel_speeds_positive",
            Assertion::HeightGain { .. } => "height_gain",
            Assertion::PayloadLifted { .. } => "payload_lifted",
            Assertion::FinalMode { .. } => "final_mode",
            Assertion::SpeedTracking { .. } => "speed_tracking",
            Assertion::JointPose { .. } => "joint_pose",
            Assertion::NoBodyContact { .. } => "no_body_contact",
        }
    }

    pub fn validate(&self, wires: usize) -> Result<(), String> {
        let window = |from: f64, to: f64| {
            if from.is_nan() || to.is_nan() || from > to {
                Err(format!("{}: empty window [{from}, {to}]", self.kind()))
            } else {
                Ok(())
            }
        };
        match self {
            Assertion::MaxDrift { from, to, .. }
            | Assertion::TensionsNonnegative { from, to, .. }
            | Assertion::TensionsWithinLimits { from, to, .. }
            | Assertion::WheelSpeedsPositive { from, to }
            | Assertion::HeightGain { from, to, .. }
            | Assertion::SpeedTracking { from, to, .. }
            | Assertion::NoBodyContact { from, to } => window(*from, *to),
            Assertion::LengthsNonincreasing {
                wires: w, from, to, ..
            } => {
                if let Some(bad) = w.iter().find(|&&k| k == 0 || k > wires) {
                    return Err(format!(
                        "lengths_nonincreasing: wire {bad} outside 1..={wires}"
                    ));
                }
                window(*from, *to)
            }
            Assertion::PayloadLifted { payload, .. } if *payload == 0 => {
                Err("payload_lifted: payloads are numbered from 1".into())
            }
            _ => Ok(()),
        }
    }

    pub fn evaluate(&self, samples: &[Sample], robot: &RobotParams) -> (bool, String) {
        let within = |from: f64, to: f64| {
            samples
                .iter()
                .filter(move |s| s.time >= from - 1e-12 && s.time <= to + 1e-12)
        };
        let Some(last) = samples.last() else {
            return (false, "no samples".into());
        };
        match self {
            Assertion::MaxDrift {
                tolerance,
                from,
                to,
            } => {
                let mut it = within(*from, *to);
                let Some(first) = it.next() else {
                    return (false, "window holds no samples".into());
                };
                let worst = it
                    .map(|s| (s.position - first.position).norm())
                    .fold(0.0, f64::max);
                (
                    worst < *tolerance,
                    format!("max drift {worst:.3e} m (limit {tolerance:.3e})"),
                )
            }
            Assertion::TensionsNonnegative {
                tolerance,
                from,
                to,
            } => {
                let lowest = within(*from, *to)
                    .flat_map(|s| s.wires.iter().filter(|w| w.attached).map(|w| w.tension))
                    .fold(f64::INFINITY, f64::min);
                (
                    lowest >= -tolerance,
                    format!("lowest attached tension {lowest:.4} N"),
                )
            }
            Assertion::TensionsWithinLimits {
                tolerance,
                from,
                to,
            } => {
                let mut worst: f64 = 0.0;
                for s in within(*from, *to) {
                    for (i, w) in s.wires.iter().enumerate().filter(|(_, w)| w.attached) {
                        worst = worst.max(w.tension / robot.f_max[i]);
                    }
                }
                (
                    worst <= 1.0 + tolerance,
                    format!("peak tension {:.1}% of f_max", 100.0 * worst),
                )
            }
            Assertion::LengthsNonincreasing {
                wires,
                tolerance,
                from,
                to,
            } => {
                let picked: Vec<&Sample> = within(*from, *to).collect();
                let mut worst: f64 = f64::NEG_INFINITY;
                for &k in wires {
                    for pair in picked.windows(2) {
                        let (a, b) = (&pair[0].wires[k - 1], &pair[1].wires[k - 1]);
                        if !(a.attached && b.attached) {
                            return (false, format!("wire {k} detached inside the window"));
                        }
                        worst = worst.max(b.length - a.length);
                    }
                }
                if picked.len() < 2 {
                    return (false, "window holds fewer than two samples".into());
                }
                (
                    worst <= *tolerance,
                    format!("largest length increase {worst:.3e} m"),
                )
            }
            Assertion::WheelSpeedsPositive { from, to } => {
                let lowest = within(*from, *to)
                    .flat_map(|s| s.wheels)
                    .fold(f64::INFINITY, f64::min);
                (lowest > 0.0, format!("slowest wheel {lowest:.4} rad/s"))
            }
            Assertion::HeightGain {
                expected,
                rel_tolerance,
                from,
                to,
            } => {
                let picked: Vec<&Sample> = within(*from, *to).collect();
                let (Some(a), Some(b)) = (picked.first(), picked.last()) else {
                    return (false, "window holds no samples".into());
                };
                let gain = b.position.z - a.position.z;
                let err = (gain - expected).abs() / expected.abs();
                (
                    err <= *rel_tolerance,
                    format!(
                        "height gain {gain:.4} m vs {expected:.4} m ({:.2}%)",
                        100.0 * err
                    ),
                )
            }
            Assertion::PayloadLifted {
                payload,
                min_height,
            } => {
                let k = payload - 1;
                let (Some(a), Some(b)) = (samples[0].payloads.get(k), last.payloads.get(k)) else {
                    return (false, format!("no payload {payload}"));
                };
                let lift = b.z - a.z;
                (
                    b.grasped && lift >= *min_height,
                    format!(
                        "payload {payload} lifted {lift:.4} m, grasped: {}",
                        b.grasped
                    ),
                )
            }
            Assertion::FinalMode {
                wire_mode,
                leg_mode,
            } => {
                let want = SystemMode::new(*wire_mode, *leg_mode);
                (
                    last.mode == want,
                    format!("final mode {}", last.mode.label()),
                )
            }
            Assertion::SpeedTracking { max_rms, from, to } => {
                let (sum, n) = within(*from, *to).fold((0.0, 0usize), |(sum, n), s| {
                    let e = s.twist_ref.fixed_rows::<3>(0) - s.linear_velocity;
                    (sum + e.norm_squared(), n + 1)
                });
                if n == 0 {
                    return (false, "window holds no samples".into());
                }
                let rms = (sum / n as f64).sqrt();
                (rms <= *max_rms, format!("velocity error RMS {rms:.3e} m/s"))
            }
            Assertion::JointPose { pose, tolerance } => {
                let target = pose.resolve(robot);
                let err = last.pose.max_abs_difference(&target);
                (err <= *tolerance, format!("joint error {err:.3e} rad"))
            }
            Assertion::NoBodyContact { from, to } => {
                let worst = within(*from, *to)
                    .map(|s| s.contacts.body)
                    .fold(0.0, f64::max);
                (
                    worst == 0.0,
                    format!("peak body contact force {worst:.3} N"),
                )
            }
        }
    }
}

impl AssertionSpec {
    pub fn evaluate(&self, samples: &[Sample], robot: &RobotParams) -> AssertionResult {
        let (passed, detail) = self.check.evaluate(samples, robot);
        AssertionResult {
            name: self
                .name
                .clone()
                .unwrap_or_else(|| self.check.kind().to_string()),
            passed,
            detail,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, z: f64, l: f64) -> Sample {
        Sample {
            time: t,
            mode: SystemMode::default(),
            position: Vec3::new(0.0, 0.0, z),
            orientation: UnitQuaternion::identity(),
            linear_velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
            twist_ref: Twist::zeros(),
            wires: vec![WireSample {
                attached: true,
                length: l,
                rate: 0.0,
                rate_ref: 0.0,
                tension: 10.0,
                tension_ref: 10.0,
                current: 0.0,
            }],
            wheels: [1.0, 1.0],
            pose: LegPose::default(),
            contacts: ContactFlags::default(),
            payloads: Vec::new(),
        }
    }

    #[test]
    fn parses_with_optional_name() {
        let a: AssertionSpec =
            serde_json::from_str(r#"{"name":"hold","check":"max_drift","tolerance":0.001}"#)
                .unwrap();
        assert_eq!(a.name.as_deref(), Some("hold"));
        assert!(matches!(a.check, Assertion::MaxDrift { to, .. } if to.is_infinite()));
        assert!(serde_json::from_str::<AssertionSpec>(
            r#"{"check":"max_drift","tolerance":1,"bogus":2}"#
        )
        .is_err());
    }

    #[test]
    fn window_checks() {
        let robot = RobotParams::default();
        let s = vec![
            sample(0.0, 1.0, 3.0),
            sample(1.0, 1.5, 2.5),
            sample(2.0, 2.0, 2.6),
        ];
        let gain = Assertion::HeightGain {
            expected: 0.5,
            rel_tolerance: 0.05,
            from: 0.0,
            to: 1.0,
        };
        assert!(gain.evaluate(&s, &robot).0);
        let mono = |to| Assertion::LengthsNonincreasing {
            wires: vec![1],
            tolerance: 0.0,
            from: 0.0,
            to,
        };
        assert!(mono(1.0).evaluate(&s, &robot).0);
        assert!(!mono(2.0).evaluate(&s, &robot).0);
        let drift = Assertion::MaxDrift {
            tolerance: 0.1,
            from: 0.0,
            to: f64::INFINITY,
        };
        assert!(!drift.evaluate(&s, &robot).0);
        assert!(mono(1.0).validate(1).is_ok());
        assert!(mono(1.0).validate(0).is_err());
    }
}
