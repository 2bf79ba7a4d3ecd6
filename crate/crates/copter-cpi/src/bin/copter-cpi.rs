//! Command-line front end: one-shot control-authority queries, closed-loop
//! scenario simulation, threshold sweeps, and offline trace replay.
//!
//! All file I/O lives here; configs are JSON, data interchange is RFC-4180
//! CSV with a header row. Log level comes from the `COPTER_CPI_LOG`
//! environment variable.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Deserialize;

use copter_cpi::control::{CascadedController, ControllerGains, References};
use copter_cpi::estimator::{corrupt_estimate, DisturbanceKf, EstimateHistory, EstimatorConfig};
use copter_cpi::perf::{assess, ThresholdSet};
use copter_cpi::supervisor::{
    run_closed_loop, ModeState, PayloadEvent, Scenario, TraceRow, WindEvent, DEFAULT_DEBOUNCE,
};
use copter_cpi::threshold::{
    default_bounds, determine_threshold, make_grid, JudgeStrategy, SigmaCutJudge, SimJudge,
    StabilityJudge,
};
use copter_cpi::vehicle::{
    basic_plant, degraded_plant, lateral_plant, FaultConfig, LinearPlant, RigidState,
    VehicleParams,
};

#[derive(Parser)]
#[command(
    name = "copter-cpi",
    version,
    about = "Control-authority analysis and control-performance monitoring for multicopters"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subsystem {
    Lateral,
    Basic,
    Degraded,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Nominal,
    Degraded,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the control-authority margin, its maximum, and the degree of
    /// controllability of one subsystem at a given disturbance
    Acai {
        /// Vehicle parameter JSON
        #[arg(long)]
        vehicle: PathBuf,
        #[arg(long, value_enum, default_value_t = Subsystem::Basic)]
        subsystem: Subsystem,
        /// Disturbance vector, comma separated; defaults to the hover lump
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        d: Option<Vec<f64>>,
    },
    /// Run a closed-loop scenario; write trace and transition CSVs plus a
    /// JSON summary on stdout
    Simulate {
        /// Scenario JSON
        #[arg(long)]
        scenario: PathBuf,
        /// Override the vehicle file referenced by the scenario
        #[arg(long)]
        vehicle: Option<PathBuf>,
        /// Override the scenario seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Grid the disturbance space, judge stability per point, and
    /// determine the performance threshold
    Sweep {
        /// Scenario JSON supplying vehicle/gains (optional; defaults used
        /// otherwise)
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        vehicle: Option<PathBuf>,
        /// Grid points per disturbance axis
        #[arg(long, default_value_t = 5)]
        nd: usize,
        /// Bucket width in sigma
        #[arg(long, default_value_t = 0.1)]
        dsigma: f64,
        /// Worker threads (default: available parallelism)
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum, default_value_t = StrategyArg::Nominal)]
        strategy: StrategyArg,
        /// Replace the simulation judge with "stable iff sigma >= CUT"
        #[arg(long)]
        synthetic_cut: Option<f64>,
        /// Simulate points with sigma = 0 instead of presuming them
        /// unstable
        #[arg(long)]
        judge_uncontrollable: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Recompute the estimation and assessment pipeline over a recorded
    /// trace CSV (no simulation)
    Replay {
        /// Telemetry CSV produced by `simulate`
        trace: PathBuf,
        /// Scenario JSON supplying vehicle, estimator config and
        /// thresholds
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        vehicle: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("{0}: {1}")]
    BadConfig(PathBuf, String),
    #[error("trace is missing columns: {0}")]
    MissingColumns(String),
    #[error("trace is empty")]
    EmptyTrace,
    #[error("d has {got} entries, subsystem needs {want}")]
    BadDimension { got: usize, want: usize },
}

type AnyError = Box<dyn std::error::Error>;

/// On-disk scenario description. Everything is optional; absent sections
/// fall back to the library defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioConfig {
    /// Path to the vehicle JSON, resolved relative to this file.
    #[serde(default)]
    vehicle: Option<String>,
    #[serde(default)]
    gains: Option<ControllerGains>,
    #[serde(default)]
    estimator: Option<EstimatorConfig>,
    #[serde(default)]
    thresholds: Option<ThresholdSet>,
    #[serde(default)]
    references: Option<References>,
    #[serde(default)]
    fault: Option<FaultConfig>,
    #[serde(default)]
    payload: Option<PayloadEvent>,
    #[serde(default)]
    wind: Option<WindEvent>,
    #[serde(default = "default_duration")]
    duration: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "default_control_every")]
    control_every: usize,
    #[serde(default = "default_debounce")]
    debounce: usize,
    #[serde(default = "default_warmup")]
    warmup: f64,
}

fn default_duration() -> f64 {
    20.0
}
fn default_dt() -> f64 {
    0.002
}
fn default_control_every() -> usize {
    5
}
fn default_debounce() -> usize {
    DEFAULT_DEBOUNCE
}
fn default_warmup() -> f64 {
    1.0
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn load_vehicle(path: &Path) -> Result<VehicleParams, CliError> {
    let text = read_to_string(path)?;
    VehicleParams::from_json_str(&text)
        .map_err(|e| CliError::BadConfig(path.to_path_buf(), e.to_string()))
}

fn load_scenario(
    path: &Path,
    vehicle_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<Scenario, AnyError> {
    let text = read_to_string(path)?;
    let config: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::BadConfig(path.to_path_buf(), e.to_string()))?;

    let params = if let Some(v) = vehicle_override {
        load_vehicle(v)?
    } else if let Some(rel) = &config.vehicle {
        let mut vpath = PathBuf::from(rel);
        if vpath.is_relative() {
            vpath = path.parent().unwrap_or(Path::new(".")).join(vpath);
        }
        load_vehicle(&vpath)?
    } else {
        VehicleParams::default_hexacopter()
    };

    let bad = |msg: String| CliError::BadConfig(path.to_path_buf(), msg);
    for (name, onset) in [
        ("fault", config.fault.as_ref().map(|f| f.onset_time)),
        ("payload", config.payload.as_ref().map(|p| p.onset_time)),
        ("wind", config.wind.as_ref().map(|w| w.onset_time)),
    ] {
        if let Some(onset) = onset {
            if !(0.0..config.duration).contains(&onset) {
                return Err(bad(format!(
                    "{name} onset {onset} s outside run duration {} s",
                    config.duration
                ))
                .into());
            }
        }
    }
    if let Some(fault) = &config.fault {
        if fault.eta.len() != params.n_p {
            return Err(bad(format!(
                "fault eta has {} entries, vehicle has {} propulsors",
                fault.eta.len(),
                params.n_p
            ))
            .into());
        }
    }

    Ok(Scenario {
        params,
        gains: config.gains.unwrap_or_default(),
        estimator: config.estimator.unwrap_or_default(),
        thresholds: config.thresholds.unwrap_or_default(),
        refs: config.references.unwrap_or(References::hover_at(-1.0)),
        fault: config.fault,
        payload: config.payload,
        wind: config.wind,
        duration: config.duration,
        seed: seed_override.unwrap_or(config.seed),
        dt: config.dt,
        control_every: config.control_every,
        debounce: config.debounce,
        warmup: config.warmup,
    })
}

fn subsystem_plant(
    params: &VehicleParams,
    which: Subsystem,
) -> Result<LinearPlant, copter_cpi::vehicle::VehicleError> {
    match which {
        Subsystem::Lateral => lateral_plant(params, 0.0),
        Subsystem::Basic => basic_plant(params),
        Subsystem::Degraded => degraded_plant(params),
    }
}

fn cmd_acai(vehicle: &Path, subsystem: Subsystem, d: Option<Vec<f64>>) -> Result<(), AnyError> {
    let params = load_vehicle(vehicle)?;
    let plant = subsystem_plant(&params, subsystem)?;
    let d = match d {
        Some(v) => {
            if v.len() != plant.n {
                return Err(CliError::BadDimension { got: v.len(), want: plant.n }.into());
            }
            DVector::from_vec(v)
        }
        None => plant.d_nominal.clone(),
    };
    let (rho, argmin) = plant.set.acai_with_argmin(&d);
    let sigma = copter_cpi::perf::doc(&plant.set, &d);
    let partition = &plant.set.partitions()[argmin];
    let summary = serde_json::json!({
        "subsystem": match subsystem {
            Subsystem::Lateral => "lateral",
            Subsystem::Basic => "basic",
            Subsystem::Degraded => "degraded",
        },
        "d": d.as_slice(),
        "acai": rho,
        "max_acai": plant.set.max_acai(),
        "sigma": sigma,
        "argmin_partition": {
            "index": argmin,
            "kept_columns": partition.kept_indices,
            "remaining_columns": partition.remaining_indices,
        },
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_simulate(
    scenario_path: &Path,
    vehicle: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), AnyError> {
    let scenario = load_scenario(scenario_path, vehicle, seed)?;
    log::info!("running scenario {} for {} s", scenario_path.display(), scenario.duration);
    let telemetry = run_closed_loop(&scenario)?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
    let trace_path = out.join("trace.csv");
    let mut w = csv::Writer::from_path(&trace_path)
        .map_err(|e| CliError::BadConfig(trace_path.clone(), e.to_string()))?;
    for row in &telemetry.rows {
        w.serialize(row)?;
    }
    w.flush()?;

    let tr_path = out.join("transitions.csv");
    let mut w = csv::Writer::from_path(&tr_path)
        .map_err(|e| CliError::BadConfig(tr_path.clone(), e.to_string()))?;
    w.write_record(["time", "from", "to", "s_l", "s_b", "s_d"])?;
    for tr in &telemetry.transitions {
        w.write_record([
            tr.time.to_string(),
            tr.from.to_string(),
            tr.to.to_string(),
            tr.report.s_l.to_string(),
            tr.report.s_b.to_string(),
            tr.report.s_d.to_string(),
        ])?;
    }
    w.flush()?;

    let (min_sl, min_sb, min_sd) = telemetry.min_s();
    let summary = serde_json::json!({
        "trace": trace_path,
        "final_mode": telemetry.final_mode.to_string(),
        "diverged_at": telemetry.diverged_at,
        "min_s": { "lateral": min_sl, "basic": min_sb, "degraded": min_sd },
        "transitions": telemetry
            .transitions
            .iter()
            .map(|tr| {
                serde_json::json!({
                    "time": tr.time,
                    "from": tr.from.to_string(),
                    "to": tr.to.to_string(),
                })
            })
            .collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    scenario: Option<&Path>,
    vehicle: Option<&Path>,
    nd: usize,
    dsigma: f64,
    workers: Option<usize>,
    strategy: StrategyArg,
    synthetic_cut: Option<f64>,
    judge_uncontrollable: bool,
    out: &Path,
) -> Result<(), AnyError> {
    let base = match scenario {
        Some(p) => load_scenario(p, vehicle, None)?,
        None => {
            let params = match vehicle {
                Some(v) => load_vehicle(v)?,
                None => VehicleParams::default_hexacopter(),
            };
            Scenario::hover(params, 20.0)
        }
    };
    let strategy = match strategy {
        StrategyArg::Nominal => JudgeStrategy::Nominal,
        StrategyArg::Degraded => JudgeStrategy::Degraded,
    };
    let plant = match strategy {
        JudgeStrategy::Nominal => basic_plant(&base.params)?,
        JudgeStrategy::Degraded => degraded_plant(&base.params)?,
    };
    let (lo, hi) = default_bounds(&plant);
    let grid = make_grid(lo, hi, nd)?;
    log::info!("sweeping {} grid points (nd = {nd})", grid.total());

    let mut judge = SimJudge::new(base.params.clone(), base.gains.clone(), strategy);
    judge.refs = base.refs;
    judge.dt = base.dt;
    judge.control_every = base.control_every;
    let cut_judge;
    let judge: &dyn StabilityJudge = match synthetic_cut {
        Some(cut) => {
            cut_judge = SigmaCutJudge { set: &plant.set, cut };
            &cut_judge
        }
        None => &judge,
    };

    let threads = workers.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let outcome = pool.install(|| {
        determine_threshold(&plant.set, &grid, judge, dsigma, judge_uncontrollable)
    })?;

    std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
    let points_path = out.join("sweep_points.csv");
    let mut w = csv::Writer::from_path(&points_path)?;
    let mut header = vec!["grid_index".to_string()];
    header.extend((0..plant.n).map(|i| format!("d{i}")));
    header.extend(["sigma", "stable", "max_error_tail"].map(String::from));
    w.write_record(&header)?;
    for p in &outcome.points {
        let mut rec = vec![p.grid_index.to_string()];
        rec.extend(p.d.iter().map(|v| v.to_string()));
        rec.push(p.sigma.to_string());
        rec.push((p.stable as u8).to_string());
        rec.push(p.max_error_tail.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let buckets_path = out.join("sweep_buckets.csv");
    let mut w = csv::Writer::from_path(&buckets_path)?;
    w.write_record(["bucket", "total", "stable", "percentage"])?;
    for row in &outcome.report.rows {
        w.write_record([
            row.label.clone(),
            row.total.to_string(),
            row.stable.to_string(),
            format!("{:.2}", row.percentage()),
        ])?;
    }
    w.flush()?;

    let summary = serde_json::json!({
        "sigma_th": outcome.sigma_th,
        "flag": format!("{:?}", outcome.flag),
        "grid_points": grid.total(),
        "points": points_path,
        "buckets": buckets_path,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Per-sample output of `replay`.
#[derive(Debug, serde::Serialize)]
struct ReplayRow {
    t: f64,
    sigma_l: f64,
    sigma_b: f64,
    sigma_d: f64,
    s_l: f64,
    s_b: f64,
    s_d: f64,
    safe_l: u8,
    safe_b: u8,
    safe_d: u8,
    mode: String,
}

const TRACE_COLUMNS: &[&str] = &[
    "t", "x", "y", "h", "vx", "vy", "vh", "phi", "theta", "psi", "p", "q", "r", "zx", "zy", "zh",
    "zphi", "ztheta", "zpsi", "phi_c", "theta_c", "u_t", "tau_x", "tau_y", "tau_z", "dl_x",
    "dl_y", "db_h", "db_roll", "db_pitch", "db_yaw", "dd_h", "dd_roll", "dd_pitch", "sigma_l",
    "sigma_b", "sigma_d", "s_l", "s_b", "s_d", "mode", "safe_l", "safe_b", "safe_d",
];

fn cmd_replay(
    trace: &Path,
    scenario_path: &Path,
    vehicle: Option<&Path>,
    out: &Path,
) -> Result<(), AnyError> {
    let scenario = load_scenario(scenario_path, vehicle, None)?;
    let mut reader = csv::Reader::from_path(trace)
        .map_err(|e| CliError::BadConfig(trace.to_path_buf(), e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|_| CliError::EmptyTrace)?
        .clone();
    let missing: Vec<&str> = TRACE_COLUMNS
        .iter()
        .filter(|c| !headers.iter().any(|h| h == **c))
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingColumns(missing.join(", ")).into());
    }
    let rows: Vec<TraceRow> = reader.deserialize().collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(CliError::EmptyTrace.into());
    }

    let params = &scenario.params;
    let lateral = lateral_plant(params, scenario.refs.psi_c)?;
    let basic = basic_plant(params)?;
    let degraded = degraded_plant(params)?;
    let dt_ctrl = scenario.control_period();
    let mut kf_l = DisturbanceKf::new(&lateral, &scenario.estimator, dt_ctrl);
    let mut kf_b = DisturbanceKf::new(&basic, &scenario.estimator, dt_ctrl);
    let mut kf_d = DisturbanceKf::new(&degraded, &scenario.estimator, dt_ctrl);
    let horizon = scenario.estimator.delay + 1.0;
    let mut hist_l = EstimateHistory::new(horizon);
    let mut hist_b = EstimateHistory::new(horizon);
    let mut hist_d = EstimateHistory::new(horizon);
    let lateral_cfg = EstimatorConfig { bias: Vec::new(), ..scenario.estimator.clone() };
    let mut mode_state = ModeState::new(scenario.debounce);

    // reconstruct the pre-loop hover command that drove the first sample
    let mut controller = CascadedController::new(params, &scenario.gains);
    let mut state = RigidState::at_rest();
    state.p.z = scenario.refs.h_c;
    let cmd = controller.nominal_control(&state, &scenario.refs, true, dt_ctrl)?;
    let mut u_basic = CascadedController::commanded_u_f(&cmd);

    std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
    let replay_path = out.join("replay.csv");
    let mut w = csv::Writer::from_path(&replay_path)?;
    let mg = params.m_a * params.g;
    for row in &rows {
        let (sps, cps) = row.zpsi.sin_cos();
        let u_lat = DVector::from_column_slice(&[
            mg * (sps * row.zphi + cps * row.ztheta),
            mg * (-cps * row.zphi + sps * row.ztheta),
        ]);
        let u_degr = u_basic.rows(0, 3).into_owned();
        let est_l = kf_l.step(
            &u_lat,
            &DVector::from_column_slice(&[row.zx, row.zy]),
            dt_ctrl,
        )?;
        let est_b = kf_b.step(
            &u_basic,
            &DVector::from_column_slice(&[row.zh, row.zphi, row.ztheta, row.zpsi]),
            dt_ctrl,
        )?;
        let est_d = kf_d.step(
            &u_degr,
            &DVector::from_column_slice(&[row.zh, row.zphi, row.ztheta]),
            dt_ctrl,
        )?;
        hist_l.push(row.t, est_l.d_hat.clone());
        hist_b.push(row.t, est_b.d_hat.clone());
        hist_d.push(row.t, est_d.d_hat.clone());
        let d_l = corrupt_estimate(&est_l, &lateral_cfg, &hist_l).d_hat;
        let d_b = corrupt_estimate(&est_b, &scenario.estimator, &hist_b).d_hat;
        let d_d = corrupt_estimate(&est_d, &scenario.estimator, &hist_d).d_hat;
        let report = assess(
            &lateral,
            &basic,
            &degraded,
            &d_l,
            &d_b,
            &d_d,
            &scenario.thresholds,
            row.t,
        )?;
        let mode = if row.t >= scenario.warmup {
            mode_state.next_mode(&report)
        } else {
            mode_state.mode()
        };
        u_basic = DVector::from_column_slice(&[row.u_t, row.tau_x, row.tau_y, row.tau_z]);
        w.serialize(ReplayRow {
            t: row.t,
            sigma_l: report.sigma_l,
            sigma_b: report.sigma_b,
            sigma_d: report.sigma_d,
            s_l: report.s_l,
            s_b: report.s_b,
            s_d: report.s_d,
            safe_l: report.safe_l as u8,
            safe_b: report.safe_b as u8,
            safe_d: report.safe_d as u8,
            mode: mode.to_string(),
        })?;
    }
    w.flush()?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "replay": replay_path,
            "samples": rows.len(),
            "final_mode": mode_state.mode().to_string(),
        }))?
    );
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("COPTER_CPI_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Acai { vehicle, subsystem, d } => cmd_acai(&vehicle, subsystem, d),
        Cmd::Simulate { scenario, vehicle, seed, out } => {
            cmd_simulate(&scenario, vehicle.as_deref(), seed, &out)
        }
        Cmd::Sweep {
            scenario,
            vehicle,
            nd,
            dsigma,
            workers,
            strategy,
            synthetic_cut,
            judge_uncontrollable,
            out,
        } => cmd_sweep(
            scenario.as_deref(),
            vehicle.as_deref(),
            nd,
            dsigma,
            workers,
            strategy,
            synthetic_cut,
            judge_uncontrollable,
            &out,
        ),
        Cmd::Replay { trace, scenario, vehicle, out } => {
            cmd_replay(&trace, &scenario, vehicle.as_deref(), &out)
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
