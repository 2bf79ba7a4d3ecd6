//! Cascaded PID controllers and thrust allocation.
//!
//! The nominal strategy runs lateral position PIDs (producing tilt
//! commands), an altitude PID (producing total thrust) and attitude PIDs
//! (producing body torques), then allocates to propulsors by the
//! minimum-norm solution clipped to the thrust limits. The degraded
//! strategy drops yaw regulation entirely: the commanded yaw torque is
//! exactly zero and allocation uses only the thrust/roll/pitch rows.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::ctrlgeom::numeric_rank;
use crate::vehicle::{effectiveness_matrix, RigidState, VehicleParams};

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("allocation matrix is row-rank deficient")]
    AllocationRankDeficient,
    #[error("unrecoverable configuration: degraded effectiveness rank {0} < 3")]
    UnrecoverableConfiguration(usize),
}

/// Single-channel PID gains with output limits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub out_min: f64,
    pub out_max: f64,
}

/// PID with derivative on the measured rate and integrator clamping at the
/// output limits.
#[derive(Debug, Clone)]
pub struct Pid {
    gains: PidGains,
    integral: f64,
}

impl Pid {
    pub fn new(gains: PidGains) -> Self {
        Self { gains, integral: 0.0 }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
    }

    pub fn step(&mut self, error: f64, rate: f64, dt: f64) -> f64 {
        let g = &self.gains;
        let candidate = self.integral + error * dt;
        let unclamped = g.kp * error + g.ki * candidate - g.kd * rate;
        let out = unclamped.clamp(g.out_min, g.out_max);
        // hold the integrator while saturated in the error direction
        let winding_up = (unclamped > g.out_max && error > 0.0)
            || (unclamped < g.out_min && error < 0.0);
        if !winding_up {
            self.integral = candidate;
        }
        out
    }
}

/// Full gain set for the cascaded controller.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    pub lateral: PidGains,
    pub altitude: PidGains,
    pub attitude_rp: PidGains,
    pub attitude_yaw: PidGains,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            lateral: PidGains { kp: 1.0, ki: 0.05, kd: 1.6, out_min: -3.0, out_max: 3.0 },
            altitude: PidGains { kp: 6.0, ki: 2.0, kd: 4.5, out_min: -8.0, out_max: 8.0 },
            attitude_rp: PidGains { kp: 80.0, ki: 100.0, kd: 14.0, out_min: -400.0, out_max: 400.0 },
            attitude_yaw: PidGains { kp: 25.0, ki: 5.0, kd: 8.0, out_min: -100.0, out_max: 100.0 },
        }
    }
}

/// Commanded thrust/torques and the allocated propulsor thrusts.
#[derive(Debug, Clone)]
pub struct ControlCommand {
    /// Total commanded thrust, N.
    pub u_t: f64,
    /// Commanded body torques, N m.
    pub u_tau: Vector3<f64>,
    /// Allocated per-propulsor thrusts after clipping, N.
    pub f: DVector<f64>,
    /// Thrust/torque vector actually achieved by the clipped thrusts.
    pub achieved: DVector<f64>,
    /// Tilt commands (phi_c, theta_c) produced by the lateral loop; zero
    /// when the lateral dynamics are given up.
    pub tilt_cmd: (f64, f64),
}

/// Setpoints for the closed loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct References {
    pub x_c: f64,
    pub y_c: f64,
    pub h_c: f64,
    pub psi_c: f64,
}

impl References {
    pub fn hover_at(h_c: f64) -> Self {
        Self { x_c: 0.0, y_c: 0.0, h_c, psi_c: 0.0 }
    }
}

/// Minimum-norm allocation `f = H^T (H H^T)^-1 u_f` clipped to `[0, K]`.
/// Returns the thrusts together with the achieved `H f`, so saturation is
/// never silent.
pub fn allocate(
    u_f: &DVector<f64>,
    h: &DMatrix<f64>,
    k_max: &[f64],
) -> Result<(DVector<f64>, DVector<f64>), ControlError> {
    assert_eq!(u_f.len(), h.nrows());
    assert_eq!(k_max.len(), h.ncols());
    if numeric_rank(h) < h.nrows() {
        return Err(ControlError::AllocationRankDeficient);
    }
    let hht = h * h.transpose();
    let inv = hht.try_inverse().ok_or(ControlError::AllocationRankDeficient)?;
    let raw = h.transpose() * inv * u_f;
    let f = DVector::from_fn(h.ncols(), |i, _| raw[i].clamp(0.0, k_max[i]));
    let achieved = h * &f;
    Ok((f, achieved))
}

/// Cascaded-PID controller instance; owns the integrator state for one
/// scenario.
#[derive(Debug, Clone)]
pub struct CascadedController {
    params: VehicleParams,
    b_f: DMatrix<f64>,
    pid_x: Pid,
    pid_y: Pid,
    pid_h: Pid,
    pid_phi: Pid,
    pid_theta: Pid,
    pid_psi: Pid,
}

impl CascadedController {
    pub fn new(params: &VehicleParams, gains: &ControllerGains) -> Self {
        Self {
            params: params.clone(),
            b_f: effectiveness_matrix(params),
            pid_x: Pid::new(gains.lateral),
            pid_y: Pid::new(gains.lateral),
            pid_h: Pid::new(gains.altitude),
            pid_phi: Pid::new(gains.attitude_rp),
            pid_theta: Pid::new(gains.attitude_rp),
            pid_psi: Pid::new(gains.attitude_yaw),
        }
    }

    /// Tilt commands from the lateral position loop, saturated at the
    /// configured maximum angles.
    fn lateral_loop(&mut self, state: &RigidState, refs: &References, dt: f64) -> (f64, f64) {
        let ax = self.pid_x.step(refs.x_c - state.p.x, state.v.x, dt);
        let ay = self.pid_y.step(refs.y_c - state.p.y, state.v.y, dt);
        // m v_l_dot = -m g A_psi Theta_l  =>  Theta_l = -(1/g) A_psi^T a_des,
        // evaluated at the current yaw so lateral control survives yaw drift
        let (sps, cps) = state.theta.z.sin_cos();
        let phi_c = -(sps * ax - cps * ay) / self.params.g;
        let theta_c = -(cps * ax + sps * ay) / self.params.g;
        (
            phi_c.clamp(-self.params.phi_max, self.params.phi_max),
            theta_c.clamp(-self.params.theta_max, self.params.theta_max),
        )
    }

    fn altitude_loop(&mut self, state: &RigidState, refs: &References, dt: f64) -> f64 {
        // h is positive down: v_h_dot = g - u_t / m
        let a_des = self.pid_h.step(refs.h_c - state.p.z, state.v.z, dt);
        let total: f64 = self.params.k_max.iter().sum();
        (self.params.m_a * (self.params.g - a_des)).clamp(0.0, total)
    }

    fn attitude_loop(
        &mut self,
        state: &RigidState,
        phi_c: f64,
        theta_c: f64,
        psi_c: Option<f64>,
        dt: f64,
    ) -> Vector3<f64> {
        let tau_x =
            self.params.j[0] * self.pid_phi.step(phi_c - state.theta.x, state.omega.x, dt);
        let tau_y =
            self.params.j[1] * self.pid_theta.step(theta_c - state.theta.y, state.omega.y, dt);
        let tau_z = match psi_c {
            Some(psi_c) => {
                let mut e = psi_c - state.theta.z;
                e = (e + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
                    - std::f64::consts::PI;
                self.params.j[2] * self.pid_psi.step(e, state.omega.z, dt)
            }
            None => 0.0,
        };
        Vector3::new(tau_x, tau_y, tau_z)
    }

    /// Full nominal cascade: lateral position, altitude, attitude, then
    /// allocation over all four channels.
    pub fn nominal_control(
        &mut self,
        state: &RigidState,
        refs: &References,
        lateral_active: bool,
        dt: f64,
    ) -> Result<ControlCommand, ControlError> {
        let (phi_c, theta_c) = if lateral_active {
            self.lateral_loop(state, refs, dt)
        } else {
            (0.0, 0.0)
        };
        let u_t = self.altitude_loop(state, refs, dt);
        let u_tau = self.attitude_loop(state, phi_c, theta_c, Some(refs.psi_c), dt);
        let u_f = DVector::from_column_slice(&[u_t, u_tau.x, u_tau.y, u_tau.z]);
        let (f, achieved) = allocate(&u_f, &self.b_f, &self.params.k_max)?;
        Ok(ControlCommand { u_t, u_tau, f, achieved, tilt_cmd: (phi_c, theta_c) })
    }

    /// Degraded cascade with the yaw channel given up: allocation uses the
    /// thrust/roll/pitch rows only and the commanded yaw torque is exactly
    /// zero.
    pub fn degraded_control(
        &mut self,
        state: &RigidState,
        refs: &References,
        lateral_active: bool,
        dt: f64,
    ) -> Result<ControlCommand, ControlError> {
        let h3 = self.b_f.rows(0, 3).into_owned();
        let rank = numeric_rank(&h3);
        if rank < 3 {
            return Err(ControlError::UnrecoverableConfiguration(rank));
        }
        let (phi_c, theta_c) = if lateral_active {
            self.lateral_loop(state, refs, dt)
        } else {
            (0.0, 0.0)
        };
        let u_t = self.altitude_loop(state, refs, dt);
        let u_tau = self.attitude_loop(state, phi_c, theta_c, None, dt);
        let u_f3 = DVector::from_column_slice(&[u_t, u_tau.x, u_tau.y]);
        let (f, achieved3) = allocate(&u_f3, &h3, &self.params.k_max)?;
        let mut achieved = DVector::zeros(4);
        achieved.rows_mut(0, 3).copy_from(&achieved3);
        achieved[3] = (self.b_f.row(3) * &f)[0];
        Ok(ControlCommand { u_t, u_tau, f, achieved, tilt_cmd: (phi_c, theta_c) })
    }

    /// Commanded thrust/torque 4-vector of a command.
    pub fn commanded_u_f(cmd: &ControlCommand) -> DVector<f64> {
        DVector::from_column_slice(&[cmd.u_t, cmd.u_tau.x, cmd.u_tau.y, cmd.u_tau.z])
    }
}
