//! Multicopter parameterization, nonlinear rigid-body model, simplified
//! linear plants, and off-nominal condition lumping.
//!
//! Vertical coordinates follow the model equations: `h` is positive down,
//! so free fall gives `v_h` increasing at `g` and hover thrust equals
//! `m_a * g`. Scenario references for "above the origin" use negative `h`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::ctrlgeom::{BoxConstraint, ControlSet, GeomError};

#[derive(Debug, thiserror::Error)]
pub enum VehicleError {
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
    #[error("vehicle config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("simulation diverged{0}")]
    Diverged(String),
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

/// Physical description of the airframe and its propulsors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Airframe mass, kg.
    pub m_a: f64,
    /// Diagonal inertia (J_x, J_y, J_z), kg m^2.
    pub j: [f64; 3],
    /// Gravitational acceleration, m/s^2.
    pub g: f64,
    /// Propulsor count.
    pub n_p: usize,
    /// Arm length from center of gravity to each propulsor, m.
    pub arm_length: f64,
    /// Yaw torque per unit thrust, N m / N.
    pub torque_coeff: f64,
    /// Rotation direction per propulsor, +1 or -1.
    pub spin_dirs: Vec<i8>,
    /// Propulsor azimuth from the body x axis, rad.
    pub azimuths: Vec<f64>,
    /// Maximum thrust per propulsor, N.
    pub k_max: Vec<f64>,
    /// Lateral command limits, rad.
    pub phi_max: f64,
    pub theta_max: f64,
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let err = |msg: String| Err(VehicleError::InvalidParams(msg));
        if !(self.m_a > 0.0) {
            return err(format!("mass must be positive, got {}", self.m_a));
        }
        if self.j.iter().any(|&ji| !(ji > 0.0)) {
            return err(format!("inertia entries must be positive, got {:?}", self.j));
        }
        if !(self.g > 0.0) {
            return err(format!("g must be positive, got {}", self.g));
        }
        if self.n_p < 4 {
            return err(format!("need at least 4 propulsors, got {}", self.n_p));
        }
        for (name, len) in [
            ("spin_dirs", self.spin_dirs.len()),
            ("azimuths", self.azimuths.len()),
            ("k_max", self.k_max.len()),
        ] {
            if len != self.n_p {
                return err(format!("{name} has {len} entries, expected n_p = {}", self.n_p));
            }
        }
        if self.spin_dirs.iter().any(|&s| s != 1 && s != -1) {
            return err(format!("spin_dirs must be +/-1, got {:?}", self.spin_dirs));
        }
        if self.k_max.iter().any(|&k| !(k > 0.0)) {
            return err(format!("k_max entries must be positive, got {:?}", self.k_max));
        }
        for (name, v) in [("phi_max", self.phi_max), ("theta_max", self.theta_max)] {
            if !(v > 0.0 && v < std::f64::consts::FRAC_PI_2) {
                return err(format!("{name} must lie in (0, pi/2), got {v}"));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, VehicleError> {
        let params: VehicleParams = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    /// Repo-default symmetric hexacopter.
    pub fn default_hexacopter() -> Self {
        let n_p = 6;
        Self {
            m_a: 1.5,
            j: [0.035, 0.035, 0.06],
            g: 9.81,
            n_p,
            arm_length: 0.30,
            torque_coeff: 0.015,
            spin_dirs: vec![1, -1, 1, -1, 1, -1],
            azimuths: (0..n_p).map(|i| i as f64 * std::f64::consts::PI / 3.0).collect(),
            k_max: vec![6.0; n_p],
            phi_max: 0.5,
            theta_max: 0.5,
        }
    }

    /// Repo-default X-layout quadcopter.
    pub fn default_quad() -> Self {
        let quarter = std::f64::consts::FRAC_PI_4;
        Self {
            m_a: 1.0,
            j: [0.02, 0.02, 0.035],
            g: 9.81,
            n_p: 4,
            arm_length: 0.25,
            torque_coeff: 0.02,
            spin_dirs: vec![1, -1, 1, -1],
            azimuths: vec![quarter, 3.0 * quarter, 5.0 * quarter, 7.0 * quarter],
            k_max: vec![5.0; 4],
            phi_max: 0.5,
            theta_max: 0.5,
        }
    }

    pub fn hover_thrust_total(&self) -> f64 {
        self.m_a * self.g
    }
}

/// Rigid-body state of the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidState {
    /// Position (x, y, h), m; h positive down.
    pub p: Vector3<f64>,
    /// Velocity, m/s.
    pub v: Vector3<f64>,
    /// Euler angles (phi, theta, psi), rad.
    pub theta: Vector3<f64>,
    /// Body rates (p, q, r), rad/s.
    pub omega: Vector3<f64>,
}

impl RigidState {
    pub fn at_rest() -> Self {
        Self {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            theta: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.theta.iter()).chain(self.omega.iter())
            .all(|x| x.is_finite())
    }
}

/// External force (inertial frame, z down) and torque (body frame) acting
/// as a disturbance.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WindDisturbance {
    pub force: [f64; 3],
    pub torque: [f64; 3],
}

/// Per-propulsor efficiency loss applied from an onset time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultConfig {
    /// Efficiency loss per propulsor, eta_i in [0, 1]; 1 means full failure.
    pub eta: Vec<f64>,
    /// Time at which the loss takes effect, s.
    pub onset_time: f64,
}

impl FaultConfig {
    pub fn none(n_p: usize) -> Self {
        Self { eta: vec![0.0; n_p], onset_time: 0.0 }
    }

    pub fn validate(&self) -> Result<(), VehicleError> {
        if self.eta.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
            return Err(VehicleError::InvalidParams(format!(
                "fault efficiencies must lie in [0, 1], got {:?}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Which simplified subsystem a linear plant describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlantKind {
    Lateral,
    Basic,
    Degraded,
}

/// Double-integrator plant `x_dot = A x + B (u - d)`, `u = H mu`, with the
/// attainable control set cached. `accel_map` is the acceleration map
/// multiplying `u - d` (for the basic dynamics this is
/// `diag(-1/m_a, 1/J_x, 1/J_y, 1/J_z)`).
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub kind: PlantKind,
    pub n: usize,
    pub m: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub accel_map: DMatrix<f64>,
    pub set: ControlSet,
    pub d_nominal: DVector<f64>,
    /// How many leading measured channels are position-like (the rest are
    /// angle-like); used to pick measurement noise levels.
    pub pos_channels: usize,
}

impl LinearPlant {
    fn from_parts(
        kind: PlantKind,
        h: DMatrix<f64>,
        bounds: BoxConstraint,
        accel_map: DMatrix<f64>,
        d_nominal: DVector<f64>,
        pos_channels: usize,
    ) -> Result<Self, VehicleError> {
        let n = h.nrows();
        let m = h.ncols();
        let set = ControlSet::new(h, bounds)?;
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        a.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
        let mut b = DMatrix::zeros(2 * n, n);
        b.view_mut((n, 0), (n, n)).copy_from(&accel_map);
        Ok(Self { kind, n, m, a, b, accel_map, set, d_nominal, pos_channels })
    }
}

/// The 4 x n_P map from propulsor thrusts to total thrust and body torques.
pub fn effectiveness_matrix(params: &VehicleParams) -> DMatrix<f64> {
    let n_p = params.n_p;
    DMatrix::from_fn(4, n_p, |row, i| match row {
        0 => 1.0,
        1 => -params.arm_length * params.azimuths[i].sin(),
        2 => params.arm_length * params.azimuths[i].cos(),
        _ => params.spin_dirs[i] as f64 * params.torque_coeff,
    })
}

/// Effectiveness under degradation, `B_f (I - Gamma)`.
pub fn effectiveness_under_fault(params: &VehicleParams, eta: &[f64]) -> DMatrix<f64> {
    let mut b_f = effectiveness_matrix(params);
    for (i, &e) in eta.iter().enumerate() {
        let scale = 1.0 - e;
        for r in 0..4 {
            b_f[(r, i)] *= scale;
        }
    }
    b_f
}

fn rotation_thrust_axis(theta: &Vector3<f64>) -> Vector3<f64> {
    let (sph, cph) = theta.x.sin_cos();
    let (sth, cth) = theta.y.sin_cos();
    let (sps, cps) = theta.z.sin_cos();
    Vector3::new(
        sps * sph + cps * sth * cph,
        -cps * sph + cph * sth * sps,
        cth * cph,
    )
}

fn euler_rate_matrix(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (sph, cph) = theta.x.sin_cos();
    let (sth, cth) = theta.y.sin_cos();
    Matrix3::new(
        1.0, sph * sth / cth, cph * sth / cth,
        0.0, cph, -sph,
        0.0, sph / cth, cph / cth,
    )
}

struct Derivative {
    p_dot: Vector3<f64>,
    v_dot: Vector3<f64>,
    theta_dot: Vector3<f64>,
    omega_dot: Vector3<f64>,
}

fn dynamics(
    state: &RigidState,
    u_t: f64,
    u_tau: &Vector3<f64>,
    wind: &WindDisturbance,
    params: &VehicleParams,
) -> Derivative {
    let j = Vector3::new(params.j[0], params.j[1], params.j[2]);
    let j_omega = j.component_mul(&state.omega);
    let wind_force = Vector3::from(wind.force);
    let wind_torque = Vector3::from(wind.torque);
    let v_dot = Vector3::new(0.0, 0.0, params.g)
        - rotation_thrust_axis(&state.theta) * (u_t / params.m_a)
        + wind_force / params.m_a;
    let torque = -state.omega.cross(&j_omega) + u_tau + wind_torque;
    Derivative {
        p_dot: state.v,
        v_dot,
        theta_dot: euler_rate_matrix(&state.theta) * state.omega,
        omega_dot: torque.component_div(&j),
    }
}

const ATTITUDE_LIMIT: f64 = std::f64::consts::FRAC_PI_2 - 1e-6;

/// One fixed-step 4th-order integration step of the rigid-body model with
/// applied propulsor thrusts `f` (clipped to `[0, K]`) and wind.
pub fn step_nonlinear(
    state: &RigidState,
    f: &DVector<f64>,
    wind: &WindDisturbance,
    params: &VehicleParams,
    dt: f64,
) -> Result<RigidState, VehicleError> {
    assert!(dt > 0.0 && dt <= 0.02, "dt must lie in (0, 0.02]");
    assert_eq!(f.len(), params.n_p);
    let f_clipped = DVector::from_fn(params.n_p, |i, _| f[i].clamp(0.0, params.k_max[i]));
    let u_f = effectiveness_matrix(params) * &f_clipped;
    let u_t = u_f[0];
    let u_tau = Vector3::new(u_f[1], u_f[2], u_f[3]);

    let add = |s: &RigidState, k: &Derivative, h: f64| RigidState {
        p: s.p + k.p_dot * h,
        v: s.v + k.v_dot * h,
        theta: s.theta + k.theta_dot * h,
        omega: s.omega + k.omega_dot * h,
    };

    let k1 = dynamics(state, u_t, &u_tau, wind, params);
    let k2 = dynamics(&add(state, &k1, dt * 0.5), u_t, &u_tau, wind, params);
    let k3 = dynamics(&add(state, &k2, dt * 0.5), u_t, &u_tau, wind, params);
    let k4 = dynamics(&add(state, &k3, dt), u_t, &u_tau, wind, params);

    let next = RigidState {
        p: state.p + (k1.p_dot + k2.p_dot * 2.0 + k3.p_dot * 2.0 + k4.p_dot) * (dt / 6.0),
        v: state.v + (k1.v_dot + k2.v_dot * 2.0 + k3.v_dot * 2.0 + k4.v_dot) * (dt / 6.0),
        theta: state.theta
            + (k1.theta_dot + k2.theta_dot * 2.0 + k3.theta_dot * 2.0 + k4.theta_dot) * (dt / 6.0),
        omega: state.omega
            + (k1.omega_dot + k2.omega_dot * 2.0 + k3.omega_dot * 2.0 + k4.omega_dot) * (dt / 6.0),
    };

    if !next.is_finite() {
        return Err(VehicleError::Diverged(": non-finite state".into()));
    }
    if next.theta.x.abs() >= ATTITUDE_LIMIT || next.theta.y.abs() >= ATTITUDE_LIMIT {
        return Err(VehicleError::Diverged(": Euler-angle singularity".into()));
    }
    Ok(next)
}

/// Lateral dynamics plant: n = m = 2, inputs are the commanded roll/pitch.
pub fn lateral_plant(params: &VehicleParams, psi_c: f64) -> Result<LinearPlant, VehicleError> {
    let (sps, cps) = psi_c.sin_cos();
    let scale = params.m_a * params.g;
    let h = DMatrix::from_row_slice(2, 2, &[scale * sps, scale * cps, -scale * cps, scale * sps]);
    let bounds = BoxConstraint::new(
        DVector::from_column_slice(&[-params.phi_max, -params.theta_max]),
        DVector::from_column_slice(&[params.phi_max, params.theta_max]),
    )?;
    let accel_map = DMatrix::identity(2, 2) * (-1.0 / params.m_a);
    LinearPlant::from_parts(PlantKind::Lateral, h, bounds, accel_map, DVector::zeros(2), 2)
}

/// Basic dynamics plant (altitude + attitude): n = 4, m = n_P.
pub fn basic_plant(params: &VehicleParams) -> Result<LinearPlant, VehicleError> {
    let h = effectiveness_matrix(params);
    let bounds = BoxConstraint::thrust(&params.k_max)?;
    let accel_map = DMatrix::from_diagonal(&DVector::from_column_slice(&[
        -1.0 / params.m_a,
        1.0 / params.j[0],
        1.0 / params.j[1],
        1.0 / params.j[2],
    ]));
    let d_nominal = DVector::from_column_slice(&[params.m_a * params.g, 0.0, 0.0, 0.0]);
    LinearPlant::from_parts(PlantKind::Basic, h, bounds, accel_map, d_nominal, 1)
}

/// Degraded dynamics plant with the yaw states ignored: n = 3, m = n_P.
pub fn degraded_plant(params: &VehicleParams) -> Result<LinearPlant, VehicleError> {
    let b_f = effectiveness_matrix(params);
    let h = b_f.rows(0, 3).into_owned();
    let bounds = BoxConstraint::thrust(&params.k_max)?;
    let accel_map = DMatrix::from_diagonal(&DVector::from_column_slice(&[
        -1.0 / params.m_a,
        1.0 / params.j[0],
        1.0 / params.j[1],
    ]));
    let d_nominal = DVector::from_column_slice(&[params.m_a * params.g, 0.0, 0.0]);
    LinearPlant::from_parts(PlantKind::Degraded, h, bounds, accel_map, d_nominal, 1)
}

/// Off-nominal conditions active at some instant.
#[derive(Debug, Clone)]
pub struct OffNominal {
    pub eta: Vec<f64>,
    pub payload_mass: f64,
    pub wind: WindDisturbance,
}

impl OffNominal {
    pub fn nominal(n_p: usize) -> Self {
        Self { eta: vec![0.0; n_p], payload_mass: 0.0, wind: WindDisturbance::default() }
    }
}

/// Ground-truth lumped disturbance of the basic dynamics for the given
/// conditions and commanded thrusts. Propulsor degradation folds in as
/// `+ B_f Gamma f` on all four rows after the `d = [d_h, -d_tau]` sign
/// convention is applied; wind folds in as `[+f_z, -tau]`.
pub fn lump_basic(
    params: &VehicleParams,
    off: &OffNominal,
    f_cmd: &DVector<f64>,
) -> DVector<f64> {
    let b_f = effectiveness_matrix(params);
    let gamma_f = DVector::from_fn(params.n_p, |i, _| off.eta[i] * f_cmd[i]);
    let fault_term = b_f * gamma_f;
    let mut d = DVector::from_column_slice(&[params.m_a * params.g, 0.0, 0.0, 0.0]);
    d += fault_term;
    d[0] += off.payload_mass * params.g + off.wind.force[2];
    for axis in 0..3 {
        d[1 + axis] -= off.wind.torque[axis];
    }
    d
}

/// Ground-truth lump for the degraded dynamics: first three rows of the
/// basic lump.
pub fn lump_degraded(
    params: &VehicleParams,
    off: &OffNominal,
    f_cmd: &DVector<f64>,
) -> DVector<f64> {
    lump_basic(params, off, f_cmd).rows(0, 3).into_owned()
}

/// Ground-truth lump for the lateral dynamics (wind only; faults and
/// payload act through the basic dynamics).
pub fn lump_lateral(off: &OffNominal) -> DVector<f64> {
    DVector::from_column_slice(&[off.wind.force[0], off.wind.force[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hexacopter_rows_balance() {
        let params = VehicleParams::default_hexacopter();
        let b_f = effectiveness_matrix(&params);
        for row in 1..4 {
            let sum: f64 = (0..params.n_p).map(|i| b_f[(row, i)]).sum();
            assert_relative_eq!(sum, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quad_effectiveness_full_rank() {
        let params = VehicleParams::default_quad();
        let b_f = effectiveness_matrix(&params);
        assert_eq!(crate::ctrlgeom::numeric_rank(&b_f), 4);
    }

    #[test]
    fn fault_scaling_matches_gamma() {
        let params = VehicleParams::default_hexacopter();
        let eta = [0.0, 0.3, 0.0, 1.0, 0.0, 0.5];
        let direct = effectiveness_under_fault(&params, &eta);
        let b_f = effectiveness_matrix(&params);
        for i in 0..params.n_p {
            for r in 0..4 {
                assert_relative_eq!(direct[(r, i)], b_f[(r, i)] * (1.0 - eta[i]), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn hover_is_equilibrium() {
        let params = VehicleParams::default_hexacopter();
        let hover = params.hover_thrust_total() / params.n_p as f64;
        let f = DVector::from_element(params.n_p, hover);
        let state = RigidState::at_rest();
        let next =
            step_nonlinear(&state, &f, &WindDisturbance::default(), &params, 0.002).unwrap();
        assert!(next.p.norm() < 1e-9 && next.v.norm() < 1e-9);
        assert!(next.theta.norm() < 1e-9 && next.omega.norm() < 1e-9);
    }

    #[test]
    fn free_fall_accelerates_at_g() {
        let params = VehicleParams::default_hexacopter();
        let f = DVector::zeros(params.n_p);
        let state = RigidState::at_rest();
        let dt = 0.002;
        let next = step_nonlinear(&state, &f, &WindDisturbance::default(), &params, dt).unwrap();
        assert_relative_eq!(next.v.z, params.g * dt, epsilon = 1e-12);
    }

    #[test]
    fn constant_pitch_torque_spins_linearly() {
        let params = VehicleParams::default_hexacopter();
        let tau_y = 0.01;
        // wind torque channel doubles as a pure torque input here
        let wind = WindDisturbance { force: [0.0; 3], torque: [0.0, tau_y, 0.0] };
        let f = DVector::zeros(params.n_p);
        let mut state = RigidState::at_rest();
        let dt = 0.002;
        let steps = 50; // 0.1 s
        for _ in 0..steps {
            state = step_nonlinear(&state, &f, &wind, &params, dt).unwrap();
        }
        let expected = tau_y / params.j[1] * dt * steps as f64;
        assert_relative_eq!(state.omega.y, expected, max_relative = 0.01);
    }

    #[test]
    fn single_axis_spin_is_preserved() {
        let params = VehicleParams::default_hexacopter();
        let f = DVector::zeros(params.n_p);
        let mut state = RigidState::at_rest();
        state.omega.z = 2.0;
        for _ in 0..500 {
            state = step_nonlinear(&state, &f, &WindDisturbance::default(), &params, 0.002)
                .unwrap();
        }
        assert_relative_eq!(state.omega.z, 2.0, epsilon = 1e-9);
        assert_relative_eq!(state.omega.x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(state.omega.y, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn lateral_plant_shape() {
        let params = VehicleParams::default_hexacopter();
        let plant = lateral_plant(&params, 0.0).unwrap();
        let h = plant.set.h();
        let s = params.m_a * params.g;
        assert_relative_eq!(h[(0, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(h[(0, 1)], s, epsilon = 1e-12);
        assert_relative_eq!(h[(1, 0)], -s, epsilon = 1e-12);
        assert_relative_eq!(h[(1, 1)], 0.0, epsilon = 1e-12);
        // H^T H = (m_a g)^2 I for any yaw reference
        let plant = lateral_plant(&params, 1.234).unwrap();
        let hth = plant.set.h().transpose() * plant.set.h();
        assert_relative_eq!(hth[(0, 0)], s * s, epsilon = 1e-9);
        assert_relative_eq!(hth[(0, 1)], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn lateral_max_acai_closed_form() {
        let params = VehicleParams::default_hexacopter();
        for psi_c in [0.0, 0.7, -2.1] {
            let plant = lateral_plant(&params, psi_c).unwrap();
            let expected = params.m_a * params.g * params.phi_max.min(params.theta_max);
            assert_relative_eq!(plant.set.max_acai(), expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn basic_and_degraded_plants() {
        let params = VehicleParams::default_hexacopter();
        let basic = basic_plant(&params).unwrap();
        assert_eq!(basic.set.partitions().len(), 20);
        assert!(basic.set.acai(&basic.d_nominal) > 0.0);
        let degraded = degraded_plant(&params).unwrap();
        assert_eq!(degraded.n, 3);
        let d3 = basic.d_nominal.rows(0, 3).into_owned();
        assert!(degraded.set.acai(&d3) >= basic.set.acai(&basic.d_nominal));

        let quad = VehicleParams::default_quad();
        assert_eq!(basic_plant(&quad).unwrap().set.partitions().len(), 4);
        assert_eq!(degraded_plant(&quad).unwrap().set.partitions().len(), 6);
    }

    #[test]
    fn degraded_survives_column_removal() {
        let params = VehicleParams::default_hexacopter();
        let b_f = effectiveness_under_fault(&params, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let h = b_f.rows(0, 3).into_owned();
        assert_eq!(crate::ctrlgeom::numeric_rank(&h), 3);
    }

    #[test]
    fn lump_nominal_and_payload() {
        let params = VehicleParams::default_hexacopter();
        let f = DVector::from_element(params.n_p, params.hover_thrust_total() / 6.0);
        let mut off = OffNominal::nominal(params.n_p);
        let d = lump_basic(&params, &off, &f);
        assert_relative_eq!(d[0], params.m_a * params.g, epsilon = 1e-12);
        assert_relative_eq!(d.rows(1, 3).norm(), 0.0, epsilon = 1e-12);

        off.payload_mass = 0.1;
        let d = lump_basic(&params, &off, &f);
        assert_relative_eq!(d[0] - params.m_a * params.g, 0.981, epsilon = 1e-12);
    }

    #[test]
    fn lump_full_failure_matches_column() {
        let params = VehicleParams::default_hexacopter();
        let hover = params.hover_thrust_total() / 6.0;
        let f = DVector::from_element(params.n_p, hover);
        let mut off = OffNominal::nominal(params.n_p);
        off.eta[1] = 1.0;
        let d = lump_basic(&params, &off, &f);
        let b_f = effectiveness_matrix(&params);
        let expected = b_f.column(1) * hover;
        assert_relative_eq!(d[0] - params.m_a * params.g, expected[0], epsilon = 1e-12);
        for r in 1..4 {
            assert_relative_eq!(d[r], expected[r], epsilon = 1e-12);
        }
    }

    #[test]
    fn linearization_consistency_near_hover() {
        let params = VehicleParams::default_hexacopter();
        let plant = basic_plant(&params).unwrap();
        let dt = 0.002;
        // small tilt, hover thrust plus a small torque request
        let mut state = RigidState::at_rest();
        state.theta = Vector3::new(0.02, -0.03, 0.01);
        state.omega = Vector3::new(0.01, 0.02, -0.01);
        let hover = params.hover_thrust_total() / 6.0;
        let f = DVector::from_element(params.n_p, hover);

        let next = step_nonlinear(&state, &f, &WindDisturbance::default(), &params, dt).unwrap();

        // linear basic plant: x = [h, phi, theta, psi, v_h, p, q, r]
        let u = plant.set.h() * &f;
        let x = DVector::from_column_slice(&[
            state.p.z, state.theta.x, state.theta.y, state.theta.z,
            state.v.z, state.omega.x, state.omega.y, state.omega.z,
        ]);
        let x_dot = &plant.a * &x + &plant.b * (&u - &plant.d_nominal);
        let x_lin = &x + x_dot * dt;
        let x_next = DVector::from_column_slice(&[
            next.p.z, next.theta.x, next.theta.y, next.theta.z,
            next.v.z, next.omega.x, next.omega.y, next.omega.z,
        ]);
        let scale = x_next.norm().max(1.0);
        assert!((x_next - x_lin).norm() / scale < 1e-4);
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let params = VehicleParams::default_hexacopter();
        let text = serde_json::to_string_pretty(&params).unwrap();
        let back = VehicleParams::from_json_str(&text).unwrap();
        assert_eq!(back.n_p, 6);

        let bad = text.replace("\"m_a\": 1.5", "\"m_a\": -1.0");
        assert!(VehicleParams::from_json_str(&bad).is_err());
    }
}
