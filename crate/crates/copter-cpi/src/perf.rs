//! Degree of controllability and control performance index.
//!
//! The degree of controllability `sigma` normalizes the control authority
//! margin by its maximum (attained at the set center) and clamps to zero
//! when the margin is nonpositive. The control performance index `S`
//! rescales `sigma` so that `S = 0` at the controller-specific threshold:
//! `S >= 0` means the closed loop is safe.

use serde::{Deserialize, Serialize};

use crate::ctrlgeom::ControlSet;
use crate::vehicle::LinearPlant;
use nalgebra::DVector;

#[derive(Debug, thiserror::Error)]
pub enum PerfError {
    #[error("threshold must be < 1, got {0}")]
    ThresholdTooLarge(f64),
    #[error("threshold must be >= 0, got {0}")]
    ThresholdNegative(f64),
}

/// Controller-specific performance thresholds per subsystem, plus the
/// confidence margin used when re-verifying near the threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdSet {
    pub sigma_th_lateral: f64,
    pub sigma_th_basic: f64,
    pub sigma_th_degraded: f64,
    pub confidence: f64,
}

impl ThresholdSet {
    pub fn validate(&self) -> Result<(), PerfError> {
        for th in [self.sigma_th_lateral, self.sigma_th_basic, self.sigma_th_degraded] {
            if th >= 1.0 {
                return Err(PerfError::ThresholdTooLarge(th));
            }
            if th < 0.0 {
                return Err(PerfError::ThresholdNegative(th));
            }
        }
        Ok(())
    }
}

impl Default for ThresholdSet {
    /// Defaults matching the shipped hexacopter controller tuning.
    fn default() -> Self {
        Self {
            sigma_th_lateral: 0.5,
            sigma_th_basic: 0.4,
            sigma_th_degraded: 0.25,
            confidence: 0.1,
        }
    }
}

/// Per-subsystem DoC and CPI snapshot.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CpiReport {
    pub sigma_l: f64,
    pub sigma_b: f64,
    pub sigma_d: f64,
    pub s_l: f64,
    pub s_b: f64,
    pub s_d: f64,
    pub safe_l: bool,
    pub safe_b: bool,
    pub safe_d: bool,
    pub timestamp: f64,
}

/// Degree of controllability of the set at disturbance `d`, in `[0, 1]`.
pub fn doc(set: &ControlSet, d: &DVector<f64>) -> f64 {
    let rho = set.acai(d);
    if rho <= 0.0 {
        0.0
    } else {
        (rho / set.max_acai()).min(1.0)
    }
}

/// Control performance index `S = (sigma - sigma_th) / (1 - sigma_th)`.
pub fn cpi(sigma: f64, sigma_th: f64) -> Result<f64, PerfError> {
    if sigma_th >= 1.0 {
        return Err(PerfError::ThresholdTooLarge(sigma_th));
    }
    if sigma_th < 0.0 {
        return Err(PerfError::ThresholdNegative(sigma_th));
    }
    Ok((sigma - sigma_th) / (1.0 - sigma_th))
}

/// Evaluate DoC and CPI for all three subsystems at the given disturbance
/// estimates.
pub fn assess(
    lateral: &LinearPlant,
    basic: &LinearPlant,
    degraded: &LinearPlant,
    d_lateral: &DVector<f64>,
    d_basic: &DVector<f64>,
    d_degraded: &DVector<f64>,
    thresholds: &ThresholdSet,
    timestamp: f64,
) -> Result<CpiReport, PerfError> {
    let sigma_l = doc(&lateral.set, d_lateral);
    let sigma_b = doc(&basic.set, d_basic);
    let sigma_d = doc(&degraded.set, d_degraded);
    let s_l = cpi(sigma_l, thresholds.sigma_th_lateral)?;
    let s_b = cpi(sigma_b, thresholds.sigma_th_basic)?;
    let s_d = cpi(sigma_d, thresholds.sigma_th_degraded)?;
    Ok(CpiReport {
        sigma_l,
        sigma_b,
        sigma_d,
        s_l,
        s_b,
        s_d,
        safe_l: s_l >= 0.0,
        safe_b: s_b >= 0.0,
        safe_d: s_d >= 0.0,
        timestamp,
    })
}
