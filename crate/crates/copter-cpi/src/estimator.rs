//! Discrete-time Kalman filter for the lumped disturbance of a linear
//! plant, plus bias/delay corruption used in the robustness studies.
//!
//! The filter runs on the augmented state `[x; d]` where the disturbance
//! is modeled as a random walk. The augmented transition matrix is
//! nilpotent, so the discretization over a step is an exact finite series.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::vehicle::LinearPlant;

#[derive(Debug, thiserror::Error)]
pub enum EstimatorError {
    #[error("covariance lost positive semidefiniteness (min diagonal {0})")]
    CovarianceInvalid(f64),
    #[error("innovation covariance not invertible")]
    SingularInnovation,
}

/// Filter tuning and corruption settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Spectral density of the state process noise.
    pub process_noise: f64,
    /// Random-walk intensity of the disturbance states.
    pub disturbance_walk: f64,
    /// Position measurement noise standard deviation (chi_p).
    pub meas_noise_pos: f64,
    /// Attitude measurement noise standard deviation (chi_a).
    pub meas_noise_att: f64,
    /// Additive estimate bias, truncated to the plant dimension.
    pub bias: Vec<f64>,
    /// Estimation delay t_tau, s.
    pub delay: f64,
    /// Extra measurement-noise scale epsilon_2, applied at the measurement
    /// source (simulation side), not inside the filter.
    pub noise_scale: f64,
    /// Measure the full state instead of positions/angles only.
    pub full_state_measurement: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            process_noise: 1e-4,
            disturbance_walk: 0.05,
            meas_noise_pos: 0.02,
            meas_noise_att: 0.002,
            bias: Vec::new(),
            delay: 0.0,
            noise_scale: 0.0,
            full_state_measurement: false,
        }
    }
}

/// Disturbance estimate with the full augmented-state covariance.
#[derive(Debug, Clone)]
pub struct DisturbanceEstimate {
    pub d_hat: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub timestamp: f64,
}

/// Kalman filter over the augmented state `[x; d]` of one linear plant.
#[derive(Debug, Clone)]
pub struct DisturbanceKf {
    n: usize,
    phi: DMatrix<f64>,
    gamma_u: DMatrix<f64>,
    c: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    x: DVector<f64>,
    p_cov: DMatrix<f64>,
    time: f64,
}

impl DisturbanceKf {
    /// Build the filter for a plant with initial disturbance guess
    /// `d_nominal` and the state at zero.
    pub fn new(plant: &LinearPlant, config: &EstimatorConfig, dt: f64) -> Self {
        assert!(dt > 0.0);
        let n = plant.n;
        let na = 3 * n;

        // augmented continuous dynamics: d/dt [x; d] = Aa [x; d] + Ba u
        let mut aa = DMatrix::zeros(na, na);
        aa.view_mut((0, 0), (2 * n, 2 * n)).copy_from(&plant.a);
        aa.view_mut((0, 2 * n), (2 * n, n)).copy_from(&(-&plant.b));
        let mut ba = DMatrix::zeros(na, n);
        ba.view_mut((0, 0), (2 * n, n)).copy_from(&plant.b);

        // Aa is nilpotent (Aa^3 = 0): the exponential series is exact
        let aa2 = &aa * &aa;
        let phi = DMatrix::identity(na, na) + &aa * dt + &aa2 * (dt * dt / 2.0);
        let gamma_u = (DMatrix::identity(na, na) * dt
            + &aa * (dt * dt / 2.0)
            + &aa2 * (dt * dt * dt / 6.0))
            * &ba;

        let n_meas = if config.full_state_measurement { 2 * n } else { n };
        let mut c = DMatrix::zeros(n_meas, na);
        for i in 0..n_meas {
            c[(i, i)] = 1.0;
        }
        let mut r = DMatrix::zeros(n_meas, n_meas);
        for i in 0..n_meas {
            let channel = i % n;
            let sd = if channel < plant.pos_channels {
                config.meas_noise_pos
            } else {
                config.meas_noise_att
            };
            r[(i, i)] = (sd * sd).max(1e-12);
        }

        let mut q = DMatrix::zeros(na, na);
        for i in 0..2 * n {
            q[(i, i)] = config.process_noise * dt;
        }
        for i in 2 * n..na {
            q[(i, i)] = config.disturbance_walk * dt;
        }

        let mut x = DVector::zeros(na);
        x.rows_mut(2 * n, n).copy_from(&plant.d_nominal);
        let mut p_cov = DMatrix::identity(na, na);
        for i in 2 * n..na {
            p_cov[(i, i)] = 100.0;
        }

        Self { n, phi, gamma_u, c, q, r, x, p_cov, time: 0.0 }
    }

    pub fn state_estimate(&self) -> DVector<f64> {
        self.x.rows(0, 2 * self.n).into_owned()
    }

    /// One predict/update cycle with known input `u` and measurement `z`.
    pub fn step(
        &mut self,
        u: &DVector<f64>,
        z: &DVector<f64>,
        dt: f64,
    ) -> Result<DisturbanceEstimate, EstimatorError> {
        assert_eq!(u.len(), self.n);
        assert_eq!(z.len(), self.c.nrows());
        self.time += dt;

        // predict
        self.x = &self.phi * &self.x + &self.gamma_u * u;
        self.p_cov = &self.phi * &self.p_cov * self.phi.transpose() + &self.q;

        // update
        let innovation = z - &self.c * &self.x;
        let s = &self.c * &self.p_cov * self.c.transpose() + &self.r;
        let s_inv = s.try_inverse().ok_or(EstimatorError::SingularInnovation)?;
        let gain = &self.p_cov * self.c.transpose() * s_inv;
        self.x += &gain * innovation;
        let ikc = DMatrix::identity(self.p_cov.nrows(), self.p_cov.ncols()) - &gain * &self.c;
        self.p_cov = &ikc * &self.p_cov;
        // enforce symmetry after the update
        self.p_cov = (&self.p_cov + self.p_cov.transpose()) * 0.5;

        let min_diag = (0..self.p_cov.nrows()).map(|i| self.p_cov[(i, i)]).fold(f64::INFINITY, f64::min);
        if !min_diag.is_finite() || min_diag < -1e-9 {
            return Err(EstimatorError::CovarianceInvalid(min_diag));
        }

        Ok(DisturbanceEstimate {
            d_hat: self.x.rows(2 * self.n, self.n).into_owned(),
            covariance: self.p_cov.clone(),
            timestamp: self.time,
        })
    }
}

/// Ring buffer of past estimates used to apply an estimation delay with
/// zero-order hold.
#[derive(Debug, Clone, Default)]
pub struct EstimateHistory {
    buf: VecDeque<(f64, DVector<f64>)>,
    horizon: f64,
}

impl EstimateHistory {
    pub fn new(horizon: f64) -> Self {
        Self { buf: VecDeque::new(), horizon }
    }

    pub fn push(&mut self, t: f64, d_hat: DVector<f64>) {
        self.buf.push_back((t, d_hat));
        while let Some((t0, _)) = self.buf.front() {
            if t - *t0 > self.horizon + 1e-9 {
                self.buf.pop_front();
            } else {
                break;
            }
        }
    }

    /// Latest stored estimate at or before `t`, or the oldest one when the
    /// buffer does not reach back that far.
    pub fn lookup(&self, t: f64) -> Option<&DVector<f64>> {
        let mut result = self.buf.front().map(|(_, d)| d);
        for (ti, d) in &self.buf {
            if *ti <= t + 1e-12 {
                result = Some(d);
            } else {
                break;
            }
        }
        result
    }
}

/// Apply the configured delay and bias to an estimate. Noise scaling is
/// applied at the measurement source, not here. The bias vector is
/// truncated to the estimate dimension.
pub fn corrupt_estimate(
    est: &DisturbanceEstimate,
    config: &EstimatorConfig,
    history: &EstimateHistory,
) -> DisturbanceEstimate {
    let mut d_hat = if config.delay > 0.0 {
        history
            .lookup(est.timestamp - config.delay)
            .cloned()
            .unwrap_or_else(|| est.d_hat.clone())
    } else {
        est.d_hat.clone()
    };
    for i in 0..d_hat.len().min(config.bias.len()) {
        d_hat[i] += config.bias[i];
    }
    DisturbanceEstimate { d_hat, covariance: est.covariance.clone(), timestamp: est.timestamp }
}
