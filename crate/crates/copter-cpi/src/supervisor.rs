//! Switching supervisor over the control modes and the closed-loop
//! simulation driver.
//!
//! Modes combine two independent degradations that only ever latch on:
//! giving up the lateral dynamics, and replacing the nominal attitude
//! control with the degraded (yaw-abandoned) strategy. That makes the mode
//! graph unidirectional (M1 to M2/M3, then to M4) and bounds any run to at
//! most two transitions.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::{CascadedController, ControlError, ControllerGains, References};
use crate::estimator::{
    corrupt_estimate, DisturbanceKf, EstimateHistory, EstimatorConfig, EstimatorError,
};
use crate::perf::{assess, CpiReport, PerfError, ThresholdSet};
use crate::vehicle::{
    basic_plant, degraded_plant, lateral_plant, FaultConfig, LinearPlant, RigidState,
    VehicleError, VehicleParams, WindDisturbance,
};

#[derive(Debug, thiserror::Error)]
pub enum SupervisorError {
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Perf(#[from] PerfError),
}

/// Supervisor control mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Full nominal control.
    M1,
    /// Lateral dynamics given up, basic dynamics nominal.
    M2,
    /// Lateral nominal, basic dynamics under degraded (yaw-abandoned) control.
    M3,
    /// Lateral given up and degraded control.
    M4,
}

impl Mode {
    fn from_flags(lateral_given_up: bool, degraded: bool) -> Self {
        match (lateral_given_up, degraded) {
            (false, false) => Mode::M1,
            (true, false) => Mode::M2,
            (false, true) => Mode::M3,
            (true, true) => Mode::M4,
        }
    }

    pub fn lateral_active(&self) -> bool {
        matches!(self, Mode::M1 | Mode::M3)
    }

    pub fn degraded_active(&self) -> bool {
        matches!(self, Mode::M3 | Mode::M4)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::M1 => "M1",
            Mode::M2 => "M2",
            Mode::M3 => "M3",
            Mode::M4 => "M4",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "M1" => Ok(Mode::M1),
            "M2" => Ok(Mode::M2),
            "M3" => Ok(Mode::M3),
            "M4" => Ok(Mode::M4),
            other => Err(format!("unknown mode {other}")),
        }
    }
}

/// One logged mode switch.
#[derive(Debug, Clone)]
pub struct Transition {
    pub time: f64,
    pub from: Mode,
    pub to: Mode,
    pub report: CpiReport,
}

/// Supervisor state: current mode, latched degradations, debounce counters
/// and the transition log.
#[derive(Debug, Clone)]
pub struct ModeState {
    lateral_given_up: bool,
    degraded: bool,
    lateral_bad_streak: usize,
    basic_bad_streak: usize,
    debounce: usize,
    pub since: f64,
    pub transition_log: Vec<Transition>,
    /// Set when degraded control is (or becomes) required while the
    /// degraded subsystem itself reports unsafe.
    pub loc_imminent: bool,
}

pub const DEFAULT_DEBOUNCE: usize = 5;

impl ModeState {
    pub fn new(debounce: usize) -> Self {
        Self {
            lateral_given_up: false,
            degraded: false,
            lateral_bad_streak: 0,
            basic_bad_streak: 0,
            debounce,
            since: 0.0,
            transition_log: Vec::new(),
            loc_imminent: false,
        }
    }

    pub fn mode(&self) -> Mode {
        Mode::from_flags(self.lateral_given_up, self.degraded)
    }

    /// Fold one CPI report into the state machine and return the resulting
    /// mode. Degradations latch after `debounce` consecutive reports with
    /// the corresponding index nonpositive; nothing ever un-latches.
    pub fn next_mode(&mut self, report: &CpiReport) -> Mode {
        if report.safe_l {
            self.lateral_bad_streak = 0;
        } else {
            self.lateral_bad_streak += 1;
        }
        if report.safe_b {
            self.basic_bad_streak = 0;
        } else {
            self.basic_bad_streak += 1;
        }

        let before = self.mode();
        if self.lateral_bad_streak >= self.debounce {
            self.lateral_given_up = true;
        }
        if self.basic_bad_streak >= self.debounce {
            self.degraded = true;
        }
        let after = self.mode();
        if after != before {
            self.transition_log.push(Transition {
                time: report.timestamp,
                from: before,
                to: after,
                report: *report,
            });
            self.since = report.timestamp;
        }

        self.loc_imminent = (self.degraded || self.basic_bad_streak > 0) && !report.safe_d;
        after
    }
}

/// A payload attachment event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayloadEvent {
    pub mass: f64,
    pub onset_time: f64,
}

/// A wind (constant force/torque) event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindEvent {
    #[serde(flatten)]
    pub wind: WindDisturbance,
    pub onset_time: f64,
}

/// A fully resolved closed-loop scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub params: VehicleParams,
    pub gains: ControllerGains,
    pub estimator: EstimatorConfig,
    pub thresholds: ThresholdSet,
    pub refs: References,
    pub fault: Option<FaultConfig>,
    pub payload: Option<PayloadEvent>,
    pub wind: Option<WindEvent>,
    pub duration: f64,
    pub seed: u64,
    /// Simulation step, s.
    pub dt: f64,
    /// Control/estimation period in simulation steps.
    pub control_every: usize,
    pub debounce: usize,
    /// Supervisor hold-off after start, s: CPI reports are logged but do
    /// not drive mode switches until the estimator has converged.
    pub warmup: f64,
}

impl Scenario {
    pub fn hover(params: VehicleParams, duration: f64) -> Self {
        Self {
            params,
            gains: ControllerGains::default(),
            estimator: EstimatorConfig::default(),
            thresholds: ThresholdSet::default(),
            refs: References::hover_at(-1.0),
            fault: None,
            payload: None,
            wind: None,
            duration,
            seed: 0,
            dt: 0.002,
            control_every: 5,
            debounce: DEFAULT_DEBOUNCE,
            warmup: 1.0,
        }
    }

    pub fn control_period(&self) -> f64 {
        self.dt * self.control_every as f64
    }
}

/// One telemetry sample at the control rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    // true state
    pub x: f64,
    pub y: f64,
    pub h: f64,
    pub vx: f64,
    pub vy: f64,
    pub vh: f64,
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    // measured channels fed to the estimators
    pub zx: f64,
    pub zy: f64,
    pub zh: f64,
    pub zphi: f64,
    pub ztheta: f64,
    pub zpsi: f64,
    // commanded inputs
    pub phi_c: f64,
    pub theta_c: f64,
    pub u_t: f64,
    pub tau_x: f64,
    pub tau_y: f64,
    pub tau_z: f64,
    // disturbance estimates
    pub dl_x: f64,
    pub dl_y: f64,
    pub db_h: f64,
    pub db_roll: f64,
    pub db_pitch: f64,
    pub db_yaw: f64,
    pub dd_h: f64,
    pub dd_roll: f64,
    pub dd_pitch: f64,
    // indices
    pub sigma_l: f64,
    pub sigma_b: f64,
    pub sigma_d: f64,
    pub s_l: f64,
    pub s_b: f64,
    pub s_d: f64,
    pub mode: String,
    pub safe_l: u8,
    pub safe_b: u8,
    pub safe_d: u8,
}

/// Result of a closed-loop run.
#[derive(Debug)]
pub struct Telemetry {
    pub rows: Vec<TraceRow>,
    pub transitions: Vec<Transition>,
    pub final_mode: Mode,
    pub diverged_at: Option<f64>,
}

impl Telemetry {
    pub fn min_s(&self) -> (f64, f64, f64) {
        let fold = |f: fn(&TraceRow) -> f64| {
            self.rows.iter().map(f).fold(f64::INFINITY, f64::min)
        };
        (fold(|r| r.s_l), fold(|r| r.s_b), fold(|r| r.s_d))
    }
}

struct Subsystems {
    lateral: LinearPlant,
    basic: LinearPlant,
    degraded: LinearPlant,
}

/// Run the full monitored closed loop: simulate, measure, estimate the
/// lumped disturbances, assess the CPI, switch modes, control, allocate.
pub fn run_closed_loop(scenario: &Scenario) -> Result<Telemetry, SupervisorError> {
    let params = &scenario.params;
    params.validate()?;
    if let Some(fault) = &scenario.fault {
        fault.validate()?;
    }
    let plants = Subsystems {
        lateral: lateral_plant(params, scenario.refs.psi_c)?,
        basic: basic_plant(params)?,
        degraded: degraded_plant(params)?,
    };

    let dt = scenario.dt;
    let dt_ctrl = scenario.control_period();
    let mut controller = CascadedController::new(params, &scenario.gains);
    let mut kf_l = DisturbanceKf::new(&plants.lateral, &scenario.estimator, dt_ctrl);
    let mut kf_b = DisturbanceKf::new(&plants.basic, &scenario.estimator, dt_ctrl);
    let mut kf_d = DisturbanceKf::new(&plants.degraded, &scenario.estimator, dt_ctrl);
    let history_horizon = scenario.estimator.delay + 1.0;
    let mut hist_l = EstimateHistory::new(history_horizon);
    let mut hist_b = EstimateHistory::new(history_horizon);
    let mut hist_d = EstimateHistory::new(history_horizon);
    let lateral_est_cfg = EstimatorConfig { bias: Vec::new(), ..scenario.estimator.clone() };

    let mut mode_state = ModeState::new(scenario.debounce);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise_gain = 1.0 + scenario.estimator.noise_scale;

    let mut state = RigidState::at_rest();
    state.p.z = scenario.refs.h_c;

    // start from the hover command
    let mut cmd = controller.nominal_control(&state, &scenario.refs, true, dt_ctrl)?;

    let steps = (scenario.duration / dt).round() as usize;
    let mut rows = Vec::with_capacity(steps / scenario.control_every + 1);
    let mut diverged_at = None;

    for k in 0..steps {
        let t = k as f64 * dt;

        // active off-nominal conditions
        let eta: Vec<f64> = match &scenario.fault {
            Some(f) if t >= f.onset_time => f.eta.clone(),
            _ => vec![0.0; params.n_p],
        };
        let payload = match &scenario.payload {
            Some(p) if t >= p.onset_time => p.mass,
            _ => 0.0,
        };
        let mut wind = match &scenario.wind {
            Some(w) if t >= w.onset_time => w.wind.clone(),
            _ => WindDisturbance::default(),
        };
        wind.force[2] += payload * params.g;

        // actual thrusts under degradation
        let f_actual = DVector::from_fn(params.n_p, |i, _| cmd.f[i] * (1.0 - eta[i]));
        match crate::vehicle::step_nonlinear(&state, &f_actual, &wind, params, dt) {
            Ok(next) => state = next,
            Err(_) => {
                diverged_at = Some(t);
                break;
            }
        }

        if (k + 1) % scenario.control_every != 0 {
            continue;
        }
        let t = (k + 1) as f64 * dt;

        // noisy measurement of positions and angles
        let mut noise = [0.0_f64; 6];
        for (i, slot) in noise.iter_mut().enumerate() {
            let sd = if i < 3 {
                scenario.estimator.meas_noise_pos
            } else {
                scenario.estimator.meas_noise_att
            };
            let e: f64 = StandardNormal.sample(&mut rng);
            *slot = sd * noise_gain * e;
        }
        let z = [
            state.p.x + noise[0],
            state.p.y + noise[1],
            state.p.z + noise[2],
            state.theta.x + noise[3],
            state.theta.y + noise[4],
            state.theta.z + noise[5],
        ];

        // estimate the lumped disturbances; the lateral subsystem's input
        // is the tilt itself, so it is fed the measured angles through the
        // force map at the measured yaw — attitude transients and yaw
        // drift then do not masquerade as lateral disturbances
        let (sps, cps) = z[5].sin_cos();
        let mg = params.m_a * params.g;
        let u_lat = DVector::from_column_slice(&[
            mg * (sps * z[3] + cps * z[4]),
            mg * (-cps * z[3] + sps * z[4]),
        ]);
        let u_basic = CascadedController::commanded_u_f(&cmd);
        let u_degr = u_basic.rows(0, 3).into_owned();
        let est_l = kf_l.step(&u_lat, &DVector::from_column_slice(&[z[0], z[1]]), dt_ctrl)?;
        let est_b = kf_b.step(
            &u_basic,
            &DVector::from_column_slice(&[z[2], z[3], z[4], z[5]]),
            dt_ctrl,
        )?;
        let est_d = kf_d.step(
            &u_degr,
            &DVector::from_column_slice(&[z[2], z[3], z[4]]),
            dt_ctrl,
        )?;
        hist_l.push(t, est_l.d_hat.clone());
        hist_b.push(t, est_b.d_hat.clone());
        hist_d.push(t, est_d.d_hat.clone());
        let d_l = corrupt_estimate(&est_l, &lateral_est_cfg, &hist_l).d_hat;
        let d_b = corrupt_estimate(&est_b, &scenario.estimator, &hist_b).d_hat;
        let d_d = corrupt_estimate(&est_d, &scenario.estimator, &hist_d).d_hat;

        let report = assess(
            &plants.lateral,
            &plants.basic,
            &plants.degraded,
            &d_l,
            &d_b,
            &d_d,
            &scenario.thresholds,
            t,
        )?;
        let mode = if t >= scenario.warmup {
            mode_state.next_mode(&report)
        } else {
            mode_state.mode()
        };

        let lateral_active = mode.lateral_active();
        cmd = if mode.degraded_active() {
            controller.degraded_control(&state, &scenario.refs, lateral_active, dt_ctrl)?
        } else {
            controller.nominal_control(&state, &scenario.refs, lateral_active, dt_ctrl)?
        };

        rows.push(TraceRow {
            t,
            x: state.p.x,
            y: state.p.y,
            h: state.p.z,
            vx: state.v.x,
            vy: state.v.y,
            vh: state.v.z,
            phi: state.theta.x,
            theta: state.theta.y,
            psi: state.theta.z,
            p: state.omega.x,
            q: state.omega.y,
            r: state.omega.z,
            zx: z[0],
            zy: z[1],
            zh: z[2],
            zphi: z[3],
            ztheta: z[4],
            zpsi: z[5],
            phi_c: cmd.tilt_cmd.0,
            theta_c: cmd.tilt_cmd.1,
            u_t: cmd.u_t,
            tau_x: cmd.u_tau.x,
            tau_y: cmd.u_tau.y,
            tau_z: cmd.u_tau.z,
            dl_x: d_l[0],
            dl_y: d_l[1],
            db_h: d_b[0],
            db_roll: d_b[1],
            db_pitch: d_b[2],
            db_yaw: d_b[3],
            dd_h: d_d[0],
            dd_roll: d_d[1],
            dd_pitch: d_d[2],
            sigma_l: report.sigma_l,
            sigma_b: report.sigma_b,
            sigma_d: report.sigma_d,
            s_l: report.s_l,
            s_b: report.s_b,
            s_d: report.s_d,
            mode: mode.to_string(),
            safe_l: report.safe_l as u8,
            safe_b: report.safe_b as u8,
            safe_d: report.safe_d as u8,
        });
    }

    Ok(Telemetry {
        rows,
        transitions: mode_state.transition_log.clone(),
        final_mode: mode_state.mode(),
        diverged_at,
    })
}
