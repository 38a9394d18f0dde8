use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use wireleg::scenario::{
    self, build_session, parse_overrides, plots, ScenarioError, ScenarioScript,
};
use wireleg::teleop::{serve_teleop, ServeOptions};
use wireleg::wire_control::{identify_winch, WinchMeasurements};

const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "wireleg",
    version,
    about = "Wire-suspended wheeled-leg robot simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script (file path or bundled name) and write its log.
    Run {
        script: PathBuf,
        /// Config override `dotted.key=value`; repeatable.
        #[arg(long = "config", value_name = "KEY=VALUE")]
        config: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Cut a run log into per-panel series files.
    Plots {
        log: PathBuf,
        /// Directory for the series files; defaults to the log's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a scenario's world to teleop clients over TCP.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Bundled scenario name or script path providing the initial state.
        #[arg(long, default_value = "hover")]
        scenario: String,
        #[arg(long = "config", value_name = "KEY=VALUE")]
        config: Vec<String>,
        #[arg(long, default_value_t = 1.0)]
        real_time_factor: f64,
        #[arg(long, default_value_t = 50.0)]
        state_rate: f64,
    },
    /// Recover winch constants from single-wire threshold currents.
    Identify {
        /// Rise threshold currents, A, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        i_up: Vec<f64>,
        /// Descend threshold currents, A.
        #[arg(long, value_delimiter = ',', required = true)]
        i_down: Vec<f64>,
        /// No-load winding currents, A.
        #[arg(long, value_delimiter = ',', required = true)]
        i0: Vec<f64>,
        /// Suspended mass, kg.
        #[arg(long)]
        mass: f64,
        /// Drum radius, m.
        #[arg(long, default_value_t = 0.0075)]
        radius: f64,
        #[arg(long, default_value_t = 9.81)]
        gravity: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WIRELEG_LOG", "info")).init();
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run {
            script,
            config,
            out,
        } => run(&script, &config, &out),
        Cmd::Plots { log, out } => match plots::emit_plots(&log, out.as_deref()) {
            Ok(paths) => {
                for p in paths {
                    println!("{}", p.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(EXIT_CONFIG, &e),
        },
        Cmd::Serve {
            port,
            host,
            scenario,
            config,
            real_time_factor,
            state_rate,
        } => serve(
            &host,
            port,
            &scenario,
            &config,
            real_time_factor,
            state_rate,
        ),
        Cmd::Identify {
            i_up,
            i_down,
            i0,
            mass,
            radius,
            gravity,
        } => identify(i_up, i_down, i0, mass, radius, gravity),
    }
}

fn fail(code: u8, e: &dyn std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}

fn run(path: &Path, overrides: &[String], out: &Path) -> ExitCode {
    let result = (|| -> Result<_, ScenarioError> {
        let script = ScenarioScript::load(path)?;
        let overrides = parse_overrides(overrides)?;
        let report = scenario::run_scenario(&script, &overrides)?;
        let paths = report.write(out)?;
        Ok((report, paths))
    })();
    let (report, (log_path, metrics_path)) = match result {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let m = &report.metrics;
    for a in &m.assertions {
        println!(
            "{} {}: {}",
            if a.passed { "PASS" } else { "FAIL" },
            a.name,
            a.detail
        );
    }
    if let Some(d) = &m.divergence {
        println!("DIVERGED: {d}");
    }
    println!(
        "{}: {:?} after {} steps, {} rows -> {} ({})",
        m.name,
        m.status,
        m.steps,
        m.rows,
        log_path.display(),
        metrics_path.display()
    );
    ExitCode::from(report.status().exit_code() as u8)
}

fn serve(
    host: &str,
    port: u16,
    name: &str,
    overrides: &[String],
    rtf: f64,
    state_rate: f64,
) -> ExitCode {
    let session = (|| -> Result<_, ScenarioError> {
        let script = ScenarioScript::load(Path::new(name))?;
        let config = script.resolve_config(&parse_overrides(overrides)?)?;
        build_session(&script, config)
    })();
    let session = match session {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let addr = match format!("{host}:{port}").parse() {
        Ok(a) => a,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let opts = ServeOptions {
        addr,
        real_time_factor: rtf,
        state_rate,
        scenario: name.to_string(),
    };
    let server = match serve_teleop(session, opts) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, &e),
    };
    let flag = server.shutdown_flag();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("no signal handler: {e}");
    }
    log::info!("serving on {}", server.local_addr());
    match server.join() {
        None => ExitCode::SUCCESS,
        Some(e) => fail(4, &e),
    }
}

fn identify(
    i_up: Vec<f64>,
    i_down: Vec<f64>,
    i0: Vec<f64>,
    mass: f64,
    radius: f64,
    gravity: f64,
) -> ExitCode {
    let meas = WinchMeasurements {
        i_up: DVector::from_vec(i_up),
        i_down: DVector::from_vec(i_down),
        i_0: DVector::from_vec(i0),
    };
    match identify_winch(&meas, mass, gravity, radius) {
        Ok(model) => {
            let doc = serde_json::json!({
                "radius": model.radius,
                "torque_constant": model.torque_constants.as_slice(),
                "coulomb_current": model.coulomb_current.as_slice(),
                "load_friction": model.load_friction.as_slice(),
                "balance_current": meas.i_up.iter().zip(meas.i_down.iter()).map(|(u, d)| 0.5 * (u + d)).collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_CONFIG, &e),
    }
}
