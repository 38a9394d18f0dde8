//! Scripted runs: script schema, config resolution, the batch runner and
//! its log and metrics outputs.

pub mod assertions;
pub mod log;
pub mod plots;

use std::path::{Path, PathBuf};

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{BodyState, Vec3};
use crate::leg::{LegJointState, LegPose, ToolPhase};
use crate::modes::{RequestSource, SystemMode};
use crate::session::{Command, RunConfig, Session, SessionError};
use crate::sim::{contact_flags, RobotParams, SimState, WorldModel};

use assertions::{AssertionResult, AssertionSpec, PayloadSample, Sample, WireSample};
use log::{Cell, LogError, LogWriter};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Log(#[from] LogError),
}

impl ScenarioError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Named leg postures, or explicit joint angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LegPreset {
    Vehicle,
    ArmReady,
    ToolOpen,
    ToolClosed,
    Custom(LegPose),
}

impl LegPreset {
    pub fn resolve(&self, robot: &RobotParams) -> LegPose {
        match self {
            LegPreset::Vehicle => robot.legs.vehicle_posture(0.0),
            LegPreset::ArmReady => robot.legs.arm_ready_posture(),
            LegPreset::ToolOpen => robot.tool.pose(ToolPhase::Open),
            LegPreset::ToolClosed => robot.tool.pose(ToolPhase::Closed),
            LegPreset::Custom(p) => *p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireInit {
    /// 1-based.
    pub wire: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub position: Vec3,
    /// Roll, pitch, yaw, rad.
    #[serde(default)]
    pub rpy: [f64; 3],
    #[serde(default = "default_legs")]
    pub legs: LegPreset,
    #[serde(default)]
    pub mode: SystemMode,
    #[serde(default)]
    pub wires: Vec<WireInit>,
    /// Start attached wires at the gravity-balancing QP tensions.
    #[serde(default)]
    pub pretension: bool,
    #[serde(default)]
    pub tool_retained: bool,
}

fn default_legs() -> LegPreset {
    LegPreset::Vehicle
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub t: f64,
    #[serde(flatten)]
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub duration: f64,
    /// Partial run configuration merged over the defaults.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub config: Value,
    #[serde(default)]
    pub world: WorldModel,
    pub initial: InitialState,
    #[serde(default)]
    pub events: Vec<ScriptEvent>,
    #[serde(default)]
    pub assertions: Vec<AssertionSpec>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("minimal", include_str!("../../scenarios/minimal.json")),
    ("hover", include_str!("../../scenarios/hover.json")),
    (
        "cliff_climb",
        include_str!("../../scenarios/cliff_climb.json"),
    ),
    ("rescue", include_str!("../../scenarios/rescue.json")),
    ("harvest", include_str!("../../scenarios/harvest.json")),
    (
        "winch_steps",
        include_str!("../../scenarios/winch_steps.json"),
    ),
];

/// Names of the scenarios compiled into the library.
pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn bundled(name: &str) -> Option<ScenarioScript> {
    let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name)?;
    Some(ScenarioScript::parse(text).expect("bundled scenario parses"))
}

impl ScenarioScript {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Self =
            serde_json::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Reads a script file, or a bundled scenario when `path` names one and
    /// no such file exists.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        if !path.exists() {
            if let Some(s) = path.to_str().and_then(bundled) {
                return Ok(s);
            }
        }
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        let mut last = 0.0;
        for (k, e) in self.events.iter().enumerate() {
            if !(e.t >= 0.0 && e.t <= self.duration) {
                return bad(format!(
                    "event {k} at t={} outside [0, {}]",
                    e.t, self.duration
                ));
            }
            if e.t < last {
                return bad(format!(
                    "event {k} at t={} precedes the previous event",
                    e.t
                ));
            }
            last = e.t;
        }
        Ok(())
    }

    /// Defaults, then the script's `config`, then `overrides` (`dotted.key`,
    /// JSON value or bare string).
    pub fn resolve_config(
        &self,
        overrides: &[(String, String)],
    ) -> Result<RunConfig, ScenarioError> {
        let mut value =
            serde_json::to_value(RunConfig::with_defaults()).expect("config serializes");
        if !self.config.is_null() {
            merge(&mut value, &self.config, "")?;
        }
        for (key, raw) in overrides {
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut value, key, v)?;
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| ScenarioError::Config(e.to_string()))?;
        config.validate().map_err(ScenarioError::Config)?;
        Ok(config)
    }
}

/// Parses `k=v` pairs.
pub fn parse_overrides<S: AsRef<str>>(pairs: &[S]) -> Result<Vec<(String, String)>, ScenarioError> {
    pairs
        .iter()
        .map(|p| {
            let p = p.as_ref();
            p.split_once('=')
                .filter(|(k, _)| !k.is_empty())
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| ScenarioError::Config(format!("override {p:?} is not key=value")))
        })
        .collect()
}

fn merge(base: &mut Value, patch: &Value, at: &str) -> Result<(), ScenarioError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => {
                        return Err(ScenarioError::Config(format!(
                            "unknown config key {path:?}"
                        )))
                    }
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), ScenarioError> {
    let mut slot = root;
    for part in key.split('.') {
        let next = match slot {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        };
        slot = next.ok_or_else(|| ScenarioError::Config(format!("unknown config key {key:?}")))?;
    }
    *slot = v;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub kind: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Passed,
    AssertionFailed,
    Diverged,
}

impl RunStatus {
    /// Process exit code for the CLI.
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Passed => 0,
            RunStatus::AssertionFailed => 3,
            RunStatus::Diverged => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max_drift: f64,
    pub height_gain: f64,
    pub min_tension: f64,
    pub max_tension: f64,
    /// RMS of paid-out rate minus reference over controlled wires and
    /// physics steps, m/s.
    pub wire_rate_rms_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub schema: String,
    pub run_hash: String,
    pub status: RunStatus,
    pub duration: f64,
    pub dt: f64,
    pub control_rate: f64,
    pub steps: u64,
    pub rows: usize,
    pub final_time: f64,
    pub final_mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<String>,
    pub summary: Summary,
    pub assertions: Vec<AssertionResult>,
    pub events: Vec<EventRecord>,
}

pub struct RunReport {
    pub log: Vec<u8>,
    pub metrics: Metrics,
    pub samples: Vec<Sample>,
}

impl RunReport {
    pub fn status(&self) -> RunStatus {
        self.metrics.status
    }

    /// Writes `<name>.csv` and `<name>.metrics.json` and returns both paths.
    pub fn write(&self, out_dir: &Path) -> Result<(PathBuf, PathBuf), ScenarioError> {
        std::fs::create_dir_all(out_dir).map_err(|e| ScenarioError::io(out_dir, e))?;
        let log_path = out_dir.join(format!("{}.csv", self.metrics.name));
        let metrics_path = out_dir.join(format!("{}.metrics.json", self.metrics.name));
        std::fs::write(&log_path, &self.log).map_err(|e| ScenarioError::io(&log_path, e))?;
        let mut json = serde_json::to_string_pretty(&self.metrics).expect("metrics serialize");
        json.push('\n');
        std::fs::write(&metrics_path, json).map_err(|e| ScenarioError::io(&metrics_path, e))?;
        Ok((log_path, metrics_path))
    }
}

/// Digest of everything that determines the run.
pub fn run_hash(script: &ScenarioScript, config: &RunConfig) -> String {
    let doc = serde_json::json!({
        "name": script.name,
        "duration": script.duration,
        "config": config,
        "world": script.world,
        "initial": script.initial,
        "events": script.events,
    });
    let bytes = serde_json::to_vec(&doc).expect("run description serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Builds the session at t = 0 from a script.
pub fn build_session(script: &ScenarioScript, config: RunConfig) -> Result<Session, ScenarioError> {
    let init = &script.initial;
    let robot = &config.robot;
    let [r, p, y] = init.rpy;
    let body = BodyState::at_rest(init.position, UnitQuaternion::from_euler_angles(r, p, y));
    let legs = LegJointState {
        pose: init.legs.resolve(robot),
        ..Default::default()
    };
    let mut state = SimState::new(body, legs, robot, &script.world);
    state.tool_retained = init.tool_retained;
    for w in &init.wires {
        let n = robot.wire_count();
        if w.wire == 0 || w.wire > n {
            return Err(ScenarioError::Config(format!(
                "initial wire {} outside 1..={n}",
                w.wire
            )));
        }
        let anchor = match (w.anchor, w.anchor_index) {
            (Some(a), _) => a,
            (None, Some(k)) => *script
                .world
                .anchors
                .get(k)
                .ok_or_else(|| ScenarioError::Config(format!("no anchor {k}")))?,
            (None, None) => {
                return Err(ScenarioError::Config(format!(
                    "wire {} has no anchor",
                    w.wire
                )))
            }
        };
        crate::sim::attach_wire(&mut state, robot, w.wire - 1, anchor)
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
    }
    let mut session =
        Session::new(config, script.world.clone(), state, init.mode).map_err(|e| match e {
            SessionError::Config(m) => ScenarioError::Config(m),
            other => ScenarioError::Config(other.to_string()),
        })?;
    if init.pretension {
        session
            .pretension_wires()
            .map_err(|e| ScenarioError::Config(format!("pretension: {e}")))?;
    }
    for spec in &script.assertions {
        spec.check
            .validate(session.config.robot.wire_count())
            .map_err(ScenarioError::Config)?;
    }
    Ok(session)
}

pub fn sample(session: &Session, time: f64) -> Sample {
    let s = &session.state;
    let out = session.output();
    let robot = &session.config.robot;
    Sample {
        time,
        mode: session.mode(),
        position: s.body.position,
        orientation: s.body.orientation,
        linear_velocity: s.body.linear_velocity,
        angular_velocity: s.body.angular_velocity,
        twist_ref: out.twist_ref,
        wires: s
            .wires
            .iter()
            .enumerate()
            .map(|(i, w)| WireSample {
                attached: w.attached,
                length: w.length,
                rate: w.rate,
                rate_ref: out.rate_ref[i],
                tension: w.tension,
                tension_ref: out.tension_ref[i],
                current: w.current,
            })
            .collect(),
        wheels: [s.legs.wheel_left, s.legs.wheel_right],
        pose: s.legs.pose,
        contacts: contact_flags(s, &session.world, robot, &session.config.sim),
        payloads: s
            .payloads
            .iter()
            .map(|p| PayloadSample {
                z: match &p.grasped {
                    Some(r) => s.body.point_to_world(r).z,
                    None => p.position.z,
                },
                grasped: p.grasped.is_some(),
            })
            .collect(),
    }
}

fn write_row(
    log: &mut LogWriter,
    smp: &Sample,
    logged_payloads: usize,
    events: &str,
) -> Result<(), LogError> {
    let num = |v: f64| Cell::Num(Some(v));
    let label = smp.mode.label();
    let mut cells = Vec::with_capacity(64);
    cells.push(num(smp.time));
    cells.push(Cell::Text(&label));
    cells.extend(smp.position.iter().map(|&v| num(v)));
    let q = smp.orientation.quaternion();
    cells.extend([q.w, q.i, q.j, q.k].into_iter().map(num));
    cells.extend(
        smp.linear_velocity
            .iter()
            .chain(smp.angular_velocity.iter())
            .map(|&v| num(v)),
    );
    cells.extend(smp.twist_ref.iter().map(|&v| num(v)));
    for w in &smp.wires {
        let att = |v: f64| Cell::Num(w.attached.then_some(v));
        cells.extend([
            att(w.length),
            att(w.rate),
            att(w.rate_ref),
            num(w.tension),
            num(w.tension_ref),
            num(w.current),
        ]);
    }
    cells.push(num(smp.wheels[0]));
    cells.push(num(smp.wheels[1]));
    cells.extend(smp.pose.to_array().into_iter().map(num));
    let c = &smp.contacts;
    cells.extend(
        [
            c.wheel_left,
            c.wheel_right,
            c.knee_left,
            c.knee_right,
            c.body,
        ]
        .into_iter()
        .map(num),
    );
    for k in 0..logged_payloads {
        cells.push(Cell::Num(smp.payloads.get(k).map(|p| p.z)));
    }
    cells.push(Cell::Text(events));
    log.row(&cells)
}

/// Runs a script to completion. Config problems are errors; assertion
/// failures and divergence are reported in the returned status.
pub fn run_scenario(
    script: &ScenarioScript,
    overrides: &[(String, String)],
) -> Result<RunReport, ScenarioError> {
    script.validate()?;
    let config = script.resolve_config(overrides)?;
    let hash = run_hash(script, &config);
    let mut session = build_session(script, config)?;
    run_session(script, &mut session, &hash)
}

fn run_session(
    script: &ScenarioScript,
    session: &mut Session,
    hash: &str,
) -> Result<RunReport, ScenarioError> {
    let dt = session.config.sim.dt;
    let per_row = (session.config.log_period / dt).round().max(1.0) as u64;
    if ((per_row as f64) * dt - session.config.log_period).abs() > 1e-9 {
        return Err(ScenarioError::Config(format!(
            "log_period {} is not a multiple of dt {dt}",
            session.config.log_period
        )));
    }
    let total = ((script.duration / dt).round() as u64).max(1);
    let wires = session.config.robot.wire_count();
    let logged_payloads = session.state.payloads.len();
    let mut log = LogWriter::new(&log::columns(wires, logged_payloads), hash)?;

    let mut events = script.events.iter().peekable();
    let mut records = Vec::new();
    let mut pending = String::new();
    let mut samples = Vec::new();
    let mut divergence = None;
    let (mut err_sq, mut err_n) = (0.0, 0u64);

    for k in 0..total {
        let t = k as f64 * dt;
        while let Some(e) = events.next_if(|e| ((e.t / dt).round() as u64).min(total - 1) <= k) {
            let kind = e.command.kind();
            let result = session.apply(&e.command, RequestSource::Scenario);
            if !pending.is_empty() {
                pending.push(';');
            }
            if result.is_err() {
                pending.push('!');
            }
            pending.push_str(kind);
            records.push(EventRecord {
                t: e.t,
                kind: kind.to_string(),
                ok: result.is_ok(),
                error: result.err().map(|e| e.to_string()),
            });
        }
        if let Err(e) = session.tick_if_due() {
            divergence = Some(e.to_string());
            break;
        }
        if k % per_row == 0 {
            let smp = sample(session, t);
            write_row(&mut log, &smp, logged_payloads, &pending)?;
            pending.clear();
            samples.push(smp);
        }
        if let Err(e) = session.integrate() {
            divergence = Some(e.to_string());
            break;
        }
        if session.mode().wire_mode != crate::wire_control::WireMode::Free {
            let out = session.output();
            for (i, w) in session
                .state
                .wires
                .iter()
                .enumerate()
                .filter(|(_, w)| w.attached)
            {
                let e = w.rate - out.rate_ref[i];
                err_sq += e * e;
                err_n += 1;
            }
        }
    }
    let final_time = session.steps() as f64 * dt;
    samples.push(sample(session, final_time));

    let robot = &session.config.robot;
    let mut results: Vec<AssertionResult> = script
        .assertions
        .iter()
        .map(|a| a.evaluate(&samples, robot))
        .collect();
    for (k, r) in records.iter().enumerate().filter(|(_, r)| !r.ok) {
        results.push(AssertionResult {
            name: format!("event {k} {}", r.kind),
            passed: false,
            detail: r.error.clone().unwrap_or_default(),
        });
    }
    let status = if divergence.is_some() {
        RunStatus::Diverged
    } else if results.iter().all(|r| r.passed) {
        RunStatus::Passed
    } else {
        RunStatus::AssertionFailed
    };

    let first = &samples[0];
    let tensions = samples
        .iter()
        .flat_map(|s| s.wires.iter().filter(|w| w.attached).map(|w| w.tension));
    let summary = Summary {
        max_drift: samples
            .iter()
            .map(|s| (s.position - first.position).norm())
            .fold(0.0, f64::max),
        height_gain: samples
            .last()
            .map(|s| s.position.z - first.position.z)
            .unwrap_or(0.0),
        min_tension: tensions.clone().fold(f64::INFINITY, f64::min),
        max_tension: tensions.fold(0.0, f64::max),
        wire_rate_rms_error: if err_n > 0 {
            (err_sq / err_n as f64).sqrt()
        } else {
            0.0
        },
    };
    let rows = log.rows();
    let metrics = Metrics {
        name: script.name.clone(),
        schema: log::SCHEMA.to_string(),
        run_hash: hash.to_string(),
        status,
        duration: script.duration,
        dt,
        control_rate: session.config.control.control_rate,
        steps: session.steps(),
        rows,
        final_time,
        final_mode: session.mode().label(),
        divergence,
        summary,
        assertions: results,
        events: records,
    };
    Ok(RunReport {
        log: log.finish()?,
        metrics,
        samples,
    })
}
