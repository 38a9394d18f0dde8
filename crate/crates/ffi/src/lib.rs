//! C ABI over the `wireleg` crate.
//!
//! Every fallible call returns a [`WlStatus`]. On failure the message is
//! kept per thread and read back with [`wl_last_error`]. Sessions are opaque
//! handles owned by the caller and released with [`wl_session_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DVector, Matrix6xX, Vector2, Vector6};
use wireleg::error::{LegError, LegSide};
use wireleg::geometry::WireJacobian;
use wireleg::leg::{two_link_ik, LegParams};
use wireleg::modes::RequestSource;
use wireleg::scenario::{build_session, bundled, ScenarioScript};
use wireleg::session::{Command, Session};
use wireleg::tension::{solve_tension_qp, QpOptions, TensionLimits};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WlStatus {
    WlOk = 0,
    WlErrNullPointer = 1,
    WlErrInvalidArgument = 2,
    WlErrConfig = 3,
    WlErrCommandRejected = 4,
    WlErrSimulation = 5,
    WlErrNotConverged = 6,
    WlErrUnreachable = 7,
    WlErrBufferTooSmall = 8,
    WlErrPanic = 9,
}

/// Opaque simulation session.
pub struct WlSession {
    inner: Session,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

type Outcome = Result<(), (WlStatus, String)>;

fn guard(f: impl FnOnce() -> Outcome) -> WlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            WlStatus::WlOk
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WlStatus::WlErrPanic
        }
    }
}

fn null(what: &str) -> (WlStatus, String) {
    (WlStatus::WlErrNullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (WlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        (
            WlStatus::WlErrInvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

unsafe fn session<'a>(s: *mut WlSession) -> Result<&'a mut Session, (WlStatus, String)> {
    s.as_mut()
        .map(|h| &mut h.inner)
        .ok_or_else(|| null("session"))
}

fn open(script: ScenarioScript, out: *mut *mut WlSession) -> Outcome {
    let config = script
        .resolve_config(&[])
        .map_err(|e| (WlStatus::WlErrConfig, e.to_string()))?;
    let inner =
        build_session(&script, config).map_err(|e| (WlStatus::WlErrConfig, e.to_string()))?;
    unsafe { *out = Box::into_raw(Box::new(WlSession { inner })) };
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = e.len().min(len - 1);
            ptr::copy_nonoverlapping(e.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opens a session at the initial state of a bundled scenario. Scripted
/// events are not replayed; drive the session with [`wl_session_command`].
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wl_session_new_bundled(
    name: *const c_char,
    out: *mut *mut WlSession,
) -> WlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = text(name, "name")?;
        let script = bundled(name).ok_or((
            WlStatus::WlErrConfig,
            format!("no bundled scenario {name:?}"),
        ))?;
        open(script, out)
    })
}

/// Opens a session from scenario JSON text.
///
/// # Safety
/// `script` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wl_session_new_json(
    script: *const c_char,
    out: *mut *mut WlSession,
) -> WlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let script = ScenarioScript::parse(text(script, "script")?)
            .map_err(|e| (WlStatus::WlErrConfig, e.to_string()))?;
        script
            .validate()
            .map_err(|e| (WlStatus::WlErrConfig, e.to_string()))?;
        open(script, out)
    })
}

/// # Safety
/// `s` must be null or a handle from a `wl_session_new_*` call that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn wl_session_free(s: *mut WlSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Applies one JSON command, e.g. `{"type":"set_velocity","linear":[0,0,0.1]}`.
///
/// # Safety
/// `s` must be a live session and `json` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wl_session_command(s: *mut WlSession, json: *const c_char) -> WlStatus {
    guard(|| {
        let s = session(s)?;
        let cmd: Command = parse_command(text(json, "json")?)?;
        s.apply(&cmd, RequestSource::Operator)
            .map(|_| ())
            .map_err(|e| (WlStatus::WlErrCommandRejected, e.to_string()))
    })
}

fn parse_command(t: &str) -> Result<Command, (WlStatus, String)> {
    serde_json::from_str(t).map_err(|e| {
        (
            WlStatus::WlErrInvalidArgument,
            format!("malformed command: {e}"),
        )
    })
}

/// Advances `steps` physics steps, running the controller when due.
///
/// # Safety
/// `s` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn wl_session_step(s: *mut WlSession, steps: u64) -> WlStatus {
    guard(|| {
        let s = session(s)?;
        for _ in 0..steps {
            s.advance()
                .map_err(|e| (WlStatus::WlErrSimulation, e.to_string()))?;
        }
        Ok(())
    })
}

/// Writes the simulated time in seconds.
///
/// # Safety
/// `s` must be a live session and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wl_session_time(s: *const WlSession, out: *mut f64) -> WlStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = s.inner.time();
        Ok(())
    })
}

/// Writes `[x, y, z, qw, qx, qy, qz]` of the body.
///
/// # Safety
/// `s` must be a live session and `out` point to 7 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn wl_session_pose(s: *const WlSession, out: *mut f64) -> WlStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let b = &s.inner.state.body;
        let q = b.orientation.quaternion();
        let v = [b.position.x, b.position.y, b.position.z, q.w, q.i, q.j, q.k];
        ptr::copy_nonoverlapping(v.as_ptr(), out, 7);
        Ok(())
    })
}

/// Writes the tension of every wire slot (zero when detached) and stores
/// the slot count in `count`. Fails with `WL_ERR_BUFFER_TOO_SMALL` when
/// `cap` is short; `count` is still set.
///
/// # Safety
/// `s` must be a live session, `out` point to `cap` doubles and `count` be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wl_session_tensions(
    s: *const WlSession,
    out: *mut f64,
    cap: usize,
    count: *mut usize,
) -> WlStatus {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("session"))?;
        let count = count.as_mut().ok_or_else(|| null("count"))?;
        let wires = &s.inner.state.wires;
        *count = wires.len();
        if cap < wires.len() {
            return Err((
                WlStatus::WlErrBufferTooSmall,
                format!("need {} slots", wires.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        for (i, w) in wires.iter().enumerate() {
            *out.add(i) = if w.attached { w.tension } else { 0.0 };
        }
        Ok(())
    })
}

/// Solves `min ‖W f − w‖² + λ‖f‖²` over `f_min ≤ f ≤ f_max`.
/// `columns` holds the `6 × m` Jacobian column-major, `target` the six
/// wrench entries. `out_tensions` receives `m` values.
///
/// # Safety
/// `columns` must hold `6 m` doubles, `target` 6, `out_tensions` `m`;
/// `out_objective` may be null.
#[no_mangle]
pub unsafe extern "C" fn wl_solve_tension_qp(
    columns: *const f64,
    m: usize,
    target: *const f64,
    f_min: f64,
    f_max: f64,
    regularization: f64,
    out_tensions: *mut f64,
    out_objective: *mut f64,
) -> WlStatus {
    guard(|| {
        if columns.is_null() || target.is_null() || out_tensions.is_null() {
            return Err(null("columns, target or out_tensions"));
        }
        if m == 0 {
            return Err((WlStatus::WlErrInvalidArgument, "no wires".into()));
        }
        let jac = WireJacobian::from_columns(Matrix6xX::from_column_slice(
            std::slice::from_raw_parts(columns, 6 * m),
        ));
        let target = Vector6::from_column_slice(std::slice::from_raw_parts(target, 6));
        let limits = TensionLimits::uniform(m, f_min, f_max)
            .map_err(|e| (WlStatus::WlErrInvalidArgument, e.to_string()))?;
        let options = QpOptions {
            regularization,
            ..QpOptions::default()
        };
        let sol = solve_tension_qp(&jac, &target, &limits, &options)
            .map_err(|e| (WlStatus::WlErrInvalidArgument, e.to_string()))?;
        ptr::copy_nonoverlapping(sol.tensions.as_ptr(), out_tensions, m);
        if let Some(o) = out_objective.as_mut() {
            *o = sol.objective;
        }
        sol.check()
            .map(|_| ())
            .map_err(|e| (WlStatus::WlErrNotConverged, e.to_string()))
    })
}

/// Elbow-down inverse kinematics of a planar two-link leg.
///
/// # Safety
/// `hip` and `knee` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wl_two_link_ik(
    x: f64,
    y: f64,
    thigh: f64,
    calf: f64,
    hip: *mut f64,
    knee: *mut f64,
) -> WlStatus {
    guard(|| {
        let (hip, knee) = match (hip.as_mut(), knee.as_mut()) {
            (Some(h), Some(k)) => (h, k),
            _ => return Err(null("hip or knee")),
        };
        if !(thigh > 0.0 && calf > 0.0) {
            return Err((
                WlStatus::WlErrInvalidArgument,
                "link lengths must be positive".into(),
            ));
        }
        let params = LegParams {
            thigh_length: thigh,
            calf_length: calf,
            ..LegParams::default()
        };
        match two_link_ik(&Vector2::new(x, y), &params, LegSide::Left) {
            Ok(a) => {
                *hip = a.hip_pitch;
                *knee = a.knee_pitch;
                Ok(())
            }
            Err(e @ LegError::Unreachable { .. }) => {
                Err((WlStatus::WlErrUnreachable, e.to_string()))
            }
        }
    })
}

/// Equal-share tensions `M‖g‖/m + kp (l̇ − l̇ref)` clamped to the box.
///
/// # Safety
/// `rates`, `rates_ref` and `out` must each hold `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn wl_wire_velocity_tensions(
    rates: *const f64,
    rates_ref: *const f64,
    m: usize,
    mass: f64,
    g_norm: f64,
    kp: f64,
    f_min: f64,
    f_max: f64,
    out: *mut f64,
) -> WlStatus {
    guard(|| {
        if rates.is_null() || rates_ref.is_null() || out.is_null() {
            return Err(null("rates, rates_ref or out"));
        }
        let limits = TensionLimits::uniform(m, f_min, f_max)
            .map_err(|e| (WlStatus::WlErrInvalidArgument, e.to_string()))?;
        let gains = wireleg::wire_control::ControllerGains {
            kp_wire: kp,
            ..Default::default()
        };
        let f = wireleg::wire_control::wire_velocity_tensions(
            &DVector::from_column_slice(std::slice::from_raw_parts(rates, m)),
            &DVector::from_column_slice(std::slice::from_raw_parts(rates_ref, m)),
            mass,
            g_norm,
            &gains,
            &limits,
        )
        .map_err(|e| (WlStatus::WlErrInvalidArgument, e.to_string()))?;
        ptr::copy_nonoverlapping(f.as_ptr(), out, m);
        Ok(())
    })
}
