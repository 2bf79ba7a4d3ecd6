//! Controller-specific performance-threshold determination.
//!
//! Grid the disturbance space, compute the degree of controllability at
//! every lattice point, judge closed-loop stability of the chosen control
//! strategy by nonlinear simulation, bucket the results by sigma, and walk
//! the buckets from high sigma down: the first bucket containing an
//! unstable point fixes the threshold at its upper edge.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{CascadedController, ControllerGains, References};
use crate::ctrlgeom::ControlSet;
use crate::perf::doc;
use crate::vehicle::{step_nonlinear, LinearPlant, RigidState, VehicleParams, WindDisturbance};

/// Refuse to materialize grids beyond this many points.
pub const GRID_CAP: usize = 10_000_000;

#[derive(Debug, thiserror::Error)]
pub enum ThresholdError {
    #[error("grid too large: {0} points exceeds the cap of {GRID_CAP}")]
    GridTooLarge(u128),
    #[error("need at least 2 grid points per axis, got {0}")]
    TooFewPoints(usize),
    #[error("invalid bounds on axis {0}: lower {1} > upper {2}")]
    InvalidBounds(usize, f64, f64),
    #[error("delta_sigma must lie in (0, 1], got {0}")]
    BadDeltaSigma(f64),
}

/// Uniform endpoint-inclusive lattice over a disturbance box. Points are
/// enumerated axis-major: the first axis varies slowest.
#[derive(Debug, Clone)]
pub struct DisturbanceGrid {
    lower: DVector<f64>,
    upper: DVector<f64>,
    n_d: usize,
}

impl DisturbanceGrid {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    /// Total number of lattice points, `n_d^n`.
    pub fn total(&self) -> usize {
        self.n_d.pow(self.dim() as u32)
    }

    /// The lattice point at the given enumeration index.
    pub fn point(&self, index: usize) -> DVector<f64> {
        assert!(index < self.total());
        let n = self.dim();
        let mut rem = index;
        let mut out = DVector::zeros(n);
        for axis in (0..n).rev() {
            let i = rem % self.n_d;
            rem /= self.n_d;
            let frac = i as f64 / (self.n_d - 1) as f64;
            out[axis] = self.lower[axis] + frac * (self.upper[axis] - self.lower[axis]);
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        (0..self.total()).map(|i| self.point(i))
    }
}

/// Build the lattice, checking the bounds and the size cap.
pub fn make_grid(
    lower: DVector<f64>,
    upper: DVector<f64>,
    n_d: usize,
) -> Result<DisturbanceGrid, ThresholdError> {
    if n_d < 2 {
        return Err(ThresholdError::TooFewPoints(n_d));
    }
    assert_eq!(lower.len(), upper.len());
    for i in 0..lower.len() {
        if lower[i] > upper[i] {
            return Err(ThresholdError::InvalidBounds(i, lower[i], upper[i]));
        }
    }
    let total = (n_d as u128).pow(lower.len() as u32);
    if total > GRID_CAP as u128 {
        return Err(ThresholdError::GridTooLarge(total));
    }
    Ok(DisturbanceGrid { lower, upper, n_d })
}

/// Default disturbance box for a plant: the lumped-thrust channel spans
/// `[0, 2 d_nominal]` (twice hover), torque channels span the maximum
/// differential torque the propulsors can produce about each axis.
pub fn default_bounds(plant: &LinearPlant) -> (DVector<f64>, DVector<f64>) {
    let h = plant.set.h();
    let k = plant.set.bounds().upper();
    let n = plant.n;
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for row in 0..n {
        let max_pos: f64 = (0..plant.m).map(|c| h[(row, c)].max(0.0) * k[c]).sum();
        if plant.d_nominal[row] > 0.0 {
            lower[row] = 0.0;
            upper[row] = 2.0 * plant.d_nominal[row];
        } else {
            lower[row] = -max_pos;
            upper[row] = max_pos;
        }
    }
    (lower, upper)
}

/// Degree of controllability at every lattice point, in enumeration order.
pub fn doc_over_grid(set: &ControlSet, grid: &DisturbanceGrid) -> Vec<f64> {
    (0..grid.total())
        .into_par_iter()
        .map(|i| doc(set, &grid.point(i)))
        .collect()
}

/// Verdict of one stability check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StabilityJudgment {
    pub stable: bool,
    /// Largest normalized tracking error over the judged tail of the run
    /// (1.0 sits exactly on the stability criterion).
    pub max_error_tail: f64,
    pub diverged_at: Option<f64>,
}

/// Decides whether a given constant lumped disturbance leaves the closed
/// loop stable.
pub trait StabilityJudge: Sync {
    fn judge(&self, d: &DVector<f64>) -> StabilityJudgment;
}

/// Which control strategy the simulation judge runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeStrategy {
    Nominal,
    Degraded,
}

/// Simulation-based judge: run the nonlinear closed loop in hover with the
/// candidate lump applied as a constant force/torque from t = 0, then
/// require bounded altitude and attitude errors over the last quarter of
/// the horizon.
#[derive(Debug, Clone)]
pub struct SimJudge {
    pub params: VehicleParams,
    pub gains: ControllerGains,
    pub refs: References,
    pub strategy: JudgeStrategy,
    /// Simulation horizon, s.
    pub horizon: f64,
    pub dt: f64,
    /// Control period in simulation steps.
    pub control_every: usize,
    /// Altitude error bound over the tail, m.
    pub tol_alt: f64,
    /// Attitude error bound over the tail, rad.
    pub tol_ang: f64,
}

impl SimJudge {
    pub fn new(params: VehicleParams, gains: ControllerGains, strategy: JudgeStrategy) -> Self {
        Self {
            params,
            gains,
            refs: References::hover_at(-1.0),
            strategy,
            horizon: 20.0,
            dt: 0.002,
            control_every: 5,
            tol_alt: 0.5,
            tol_ang: 0.2,
        }
    }

    /// Translate a lumped disturbance (thrust channel positive, torque
    /// channels in the `-tau` convention) back into the equivalent constant
    /// wind force/torque. The thrust channel is measured relative to the
    /// hover lump `m_a g`.
    fn wind_equivalent(&self, d: &DVector<f64>) -> WindDisturbance {
        let mut wind = WindDisturbance::default();
        wind.force[2] = d[0] - self.params.m_a * self.params.g;
        for axis in 0..(d.len() - 1).min(3) {
            wind.torque[axis] = -d[1 + axis];
        }
        wind
    }
}

impl StabilityJudge for SimJudge {
    fn judge(&self, d: &DVector<f64>) -> StabilityJudgment {
        let wind = self.wind_equivalent(d);
        let mut controller = CascadedController::new(&self.params, &self.gains);
        let mut state = RigidState::at_rest();
        state.p.z = self.refs.h_c;
        let dt_ctrl = self.dt * self.control_every as f64;

        let steps = (self.horizon / self.dt).round() as usize;
        let tail_from = steps - steps / 4;
        let mut max_err: f64 = 0.0;

        // judging the basic/degraded dynamics only: lateral loop off
        let mut cmd = match self.strategy {
            JudgeStrategy::Nominal => controller.nominal_control(&state, &self.refs, false, dt_ctrl),
            JudgeStrategy::Degraded => {
                controller.degraded_control(&state, &self.refs, false, dt_ctrl)
            }
        }
        .expect("hover allocation");

        for k in 0..steps {
            match step_nonlinear(&state, &cmd.f, &wind, &self.params, self.dt) {
                Ok(next) => state = next,
                Err(_) => {
                    return StabilityJudgment {
                        stable: false,
                        max_error_tail: f64::INFINITY,
                        diverged_at: Some(k as f64 * self.dt),
                    }
                }
            }
            if (k + 1) % self.control_every == 0 {
                cmd = match self.strategy {
                    JudgeStrategy::Nominal => {
                        controller.nominal_control(&state, &self.refs, false, dt_ctrl)
                    }
                    JudgeStrategy::Degraded => {
                        controller.degraded_control(&state, &self.refs, false, dt_ctrl)
                    }
                }
                .expect("allocation");
            }
            if k + 1 >= tail_from {
                let mut err = ((state.p.z - self.refs.h_c).abs() / self.tol_alt)
                    .max(state.theta.x.abs() / self.tol_ang)
                    .max(state.theta.y.abs() / self.tol_ang);
                if self.strategy == JudgeStrategy::Nominal {
                    let mut psi_err = state.theta.z - self.refs.psi_c;
                    psi_err = (psi_err + std::f64::consts::PI)
                        .rem_euclid(2.0 * std::f64::consts::PI)
                        - std::f64::consts::PI;
                    err = err.max(psi_err.abs() / self.tol_ang);
                }
                max_err = max_err.max(err);
            }
        }
        StabilityJudgment { stable: max_err < 1.0, max_error_tail: max_err, diverged_at: None }
    }
}

/// Test/analysis judge that declares a point stable iff its degree of
/// controllability clears a fixed cut.
pub struct SigmaCutJudge<'a> {
    pub set: &'a ControlSet,
    pub cut: f64,
}

impl StabilityJudge for SigmaCutJudge<'_> {
    fn judge(&self, d: &DVector<f64>) -> StabilityJudgment {
        let sigma = doc(self.set, d);
        StabilityJudgment {
            stable: sigma >= self.cut,
            max_error_tail: if sigma >= self.cut { 0.0 } else { f64::INFINITY },
            diverged_at: None,
        }
    }
}

/// One row of the bucket histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub label: String,
    /// Lower sigma edge (inclusive).
    pub lower: f64,
    /// Upper sigma edge (exclusive, except for the sigma = 1 row).
    pub upper: f64,
    pub total: usize,
    pub stable: usize,
}

impl BucketRow {
    pub fn percentage(&self) -> f64 {
        if self.total == 0 {
            100.0
        } else {
            100.0 * self.stable as f64 / self.total as f64
        }
    }
}

/// Full histogram: the sigma = 1 row, the interval rows from high to low
/// sigma, and the uncontrollable (sigma = 0) row last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketReport {
    pub delta_sigma: f64,
    pub rows: Vec<BucketRow>,
}

impl BucketReport {
    pub fn total_points(&self) -> usize {
        self.rows.iter().map(|r| r.total).sum()
    }
}

/// How the stopping rule terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdFlag {
    /// An unstable point was found in an interior bucket.
    Established,
    /// Every judged point was stable; the returned threshold is 0.
    NoInstabilityFound,
    /// Instability already at sigma = 1 or in the top bucket edge; the
    /// returned threshold of 1 violates the sigma_th < 1 design assumption.
    Unreasonable,
}

/// Per-point sweep record, in grid enumeration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointRecord {
    pub grid_index: usize,
    pub d: Vec<f64>,
    pub sigma: f64,
    pub stable: bool,
    pub max_error_tail: f64,
}

/// Outcome of the full sweep.
#[derive(Debug, Clone)]
pub struct ThresholdOutcome {
    pub sigma_th: f64,
    pub flag: ThresholdFlag,
    pub report: BucketReport,
    pub points: Vec<PointRecord>,
}

const SIGMA_ONE_TOL: f64 = 1e-12;

/// Interval-bucket index for sigma strictly inside (0, 1): bucket `k`
/// covers `[1 - k delta, 1 - (k - 1) delta)`.
fn bucket_index(sigma: f64, delta: f64) -> usize {
    let k = ((1.0 - sigma) / delta - 1e-9).ceil() as usize;
    k.max(1)
}

/// Sweep the grid: compute sigma per point, judge stability (skipping
/// uncontrollable points unless `judge_uncontrollable`), bucket, and apply
/// the stopping rule from high sigma down.
pub fn determine_threshold(
    set: &ControlSet,
    grid: &DisturbanceGrid,
    judge: &dyn StabilityJudge,
    delta_sigma: f64,
    judge_uncontrollable: bool,
) -> Result<ThresholdOutcome, ThresholdError> {
    if !(delta_sigma > 0.0 && delta_sigma <= 1.0) {
        return Err(ThresholdError::BadDeltaSigma(delta_sigma));
    }
    let sigmas = doc_over_grid(set, grid);

    let points: Vec<PointRecord> = (0..grid.total())
        .into_par_iter()
        .map(|i| {
            let d = grid.point(i);
            let sigma = sigmas[i];
            let judgment = if sigma > 0.0 || judge_uncontrollable {
                judge.judge(&d)
            } else {
                // uncontrollable: unstable without simulation
                StabilityJudgment {
                    stable: false,
                    max_error_tail: f64::INFINITY,
                    diverged_at: None,
                }
            };
            PointRecord {
                grid_index: i,
                d: d.iter().copied().collect(),
                sigma,
                stable: judgment.stable,
                max_error_tail: judgment.max_error_tail,
            }
        })
        .collect();

    let n_buckets = (1.0 / delta_sigma - 1e-9).ceil() as usize;
    // rows: [0] sigma = 1, [1..=n_buckets] intervals, [n_buckets + 1] sigma = 0
    let mut rows: Vec<BucketRow> = Vec::with_capacity(n_buckets + 2);
    rows.push(BucketRow { label: "sigma=1".into(), lower: 1.0, upper: 1.0, total: 0, stable: 0 });
    for k in 1..=n_buckets {
        let upper = 1.0 - (k - 1) as f64 * delta_sigma;
        let lower = (1.0 - k as f64 * delta_sigma).max(0.0);
        rows.push(BucketRow {
            label: format!("[{lower:.2},{upper:.2})"),
            lower,
            upper,
            total: 0,
            stable: 0,
        });
    }
    rows.push(BucketRow {
        label: "uncontrollable".into(),
        lower: 0.0,
        upper: 0.0,
        total: 0,
        stable: 0,
    });

    for p in &points {
        let row = if p.sigma >= 1.0 - SIGMA_ONE_TOL {
            0
        } else if p.sigma <= 0.0 {
            n_buckets + 1
        } else {
            bucket_index(p.sigma, delta_sigma).min(n_buckets)
        };
        rows[row].total += 1;
        if p.stable {
            rows[row].stable += 1;
        }
    }

    // stopping rule: scan from sigma = 1 down through the interval buckets;
    // the uncontrollable row never establishes a threshold
    let mut sigma_th = 0.0;
    let mut flag = ThresholdFlag::NoInstabilityFound;
    for (row_idx, row) in rows.iter().enumerate().take(n_buckets + 1) {
        if row.stable < row.total {
            if row_idx <= 1 {
                sigma_th = 1.0;
                flag = ThresholdFlag::Unreasonable;
            } else {
                // row_idx = k: threshold at the bucket's upper edge
                sigma_th = 1.0 - (row_idx - 1) as f64 * delta_sigma;
                flag = ThresholdFlag::Established;
            }
            break;
        }
    }

    Ok(ThresholdOutcome {
        sigma_th,
        flag,
        report: BucketReport { delta_sigma, rows },
        points,
    })
}

/// Grid indices whose sigma lies in `[sigma_th, sigma_th + c_sigma]` —
/// the only points that need re-verification after a threshold is found.
pub fn confidence_scan(points: &[PointRecord], sigma_th: f64, c_sigma: f64) -> Vec<usize> {
    assert!(c_sigma >= 0.0);
    points
        .iter()
        .filter(|p| p.sigma >= sigma_th - 1e-12 && p.sigma <= sigma_th + c_sigma + 1e-12)
        .map(|p| p.grid_index)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctrlgeom::BoxConstraint;
    use crate::vehicle::basic_plant;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn set_1d() -> ControlSet {
        let h = DMatrix::from_row_slice(1, 1, &[1.0]);
        let bounds = BoxConstraint::new(
            DVector::from_column_slice(&[0.0]),
            DVector::from_column_slice(&[2.0]),
        )
        .unwrap();
        ControlSet::new(h, bounds).unwrap()
    }

    fn grid_1d(n_d: usize) -> DisturbanceGrid {
        make_grid(
            DVector::from_column_slice(&[0.0]),
            DVector::from_column_slice(&[2.0]),
            n_d,
        )
        .unwrap()
    }

    #[test]
    fn grid_counts() {
        let g = make_grid(DVector::zeros(4), DVector::from_element(4, 1.0), 21).unwrap();
        assert_eq!(g.total(), 194_481);
        let g = grid_1d(2);
        assert_eq!(g.iter().map(|p| p[0]).collect::<Vec<_>>(), vec![0.0, 2.0]);
        let g = make_grid(DVector::zeros(2), DVector::from_element(2, 1.0), 3).unwrap();
        assert_eq!(g.total(), 9);
        assert!(g.iter().any(|p| p[0] == 0.5 && p[1] == 0.5));
    }

    #[test]
    fn grid_enumeration_is_axis_major() {
        let g = make_grid(DVector::zeros(2), DVector::from_element(2, 1.0), 2).unwrap();
        let pts: Vec<(f64, f64)> = g.iter().map(|p| (p[0], p[1])).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn grid_cap_enforced() {
        let err = make_grid(DVector::zeros(4), DVector::from_element(4, 1.0), 100).unwrap_err();
        assert!(matches!(err, ThresholdError::GridTooLarge(_)));
    }

    #[test]
    fn doc_over_grid_matches_pointwise() {
        let set = set_1d();
        let g = grid_1d(21);
        let sigmas = doc_over_grid(&set, &g);
        assert_eq!(sigmas.len(), 21);
        assert_relative_eq!(sigmas[10], 1.0); // the set center
        assert_relative_eq!(sigmas[0], 0.0);
        assert_relative_eq!(sigmas[5], 0.5);
    }

    #[test]
    fn synthetic_cut_traces_algorithm() {
        let set = set_1d();
        let g = grid_1d(21);
        let judge = SigmaCutJudge { set: &set, cut: 0.55 };
        let out = determine_threshold(&set, &g, &judge, 0.1, false).unwrap();
        assert_eq!(out.flag, ThresholdFlag::Established);
        assert_relative_eq!(out.sigma_th, 0.6);
        assert_eq!(out.report.total_points(), 21);
    }

    #[test]
    fn all_stable_flags_no_instability() {
        let set = set_1d();
        let g = grid_1d(21);
        let judge = SigmaCutJudge { set: &set, cut: -1.0 };
        let out = determine_threshold(&set, &g, &judge, 0.1, false).unwrap();
        // uncontrollable endpoints are presumed unstable but never
        // establish a threshold
        assert_eq!(out.flag, ThresholdFlag::NoInstabilityFound);
        assert_relative_eq!(out.sigma_th, 0.0);
    }

    #[test]
    fn instability_at_top_is_unreasonable() {
        let set = set_1d();
        let g = grid_1d(21);
        let judge = SigmaCutJudge { set: &set, cut: 2.0 };
        let out = determine_threshold(&set, &g, &judge, 0.1, false).unwrap();
        assert_eq!(out.flag, ThresholdFlag::Unreasonable);
        assert_relative_eq!(out.sigma_th, 1.0);
    }

    #[test]
    fn stopping_rule_is_exact() {
        let set = set_1d();
        let g = grid_1d(41);
        let judge = SigmaCutJudge { set: &set, cut: 0.47 };
        let out = determine_threshold(&set, &g, &judge, 0.1, false).unwrap();
        for p in &out.points {
            if p.sigma >= out.sigma_th {
                assert!(judge.judge(&DVector::from_column_slice(&p.d)).stable);
            }
        }
    }

    #[test]
    fn confidence_scan_filters_by_sigma() {
        let set = set_1d();
        let g = grid_1d(21);
        let judge = SigmaCutJudge { set: &set, cut: 0.55 };
        let out = determine_threshold(&set, &g, &judge, 0.1, false).unwrap();
        let all = confidence_scan(&out.points, out.sigma_th, 1.0);
        for i in &all {
            assert!(out.points[*i].sigma >= out.sigma_th - 1e-12);
        }
        let edge = confidence_scan(&out.points, out.sigma_th, 0.0);
        for i in &edge {
            assert_relative_eq!(out.points[*i].sigma, out.sigma_th, epsilon = 1e-9);
        }
        assert!(!edge.is_empty());
        assert!(edge.len() < all.len());
    }

    #[test]
    fn bucket_totals_sum_to_grid_size() {
        let set = set_1d();
        let g = grid_1d(33);
        let judge = SigmaCutJudge { set: &set, cut: 0.5 };
        let out = determine_threshold(&set, &g, &judge, 0.1, false).unwrap();
        assert_eq!(out.report.total_points(), 33);
    }

    #[test]
    fn sim_judge_hover_stable_and_overload_unstable() {
        let params = VehicleParams::default_hexacopter();
        let plant = basic_plant(&params).unwrap();
        let judge =
            SimJudge::new(params.clone(), ControllerGains::default(), JudgeStrategy::Nominal);
        let hover = judge.judge(&plant.d_nominal);
        assert!(hover.stable, "hover lump must be stable, err {}", hover.max_error_tail);

        let total_thrust: f64 = params.k_max.iter().sum();
        let mut overload = plant.d_nominal.clone();
        overload[0] = total_thrust * 1.2;
        let verdict = judge.judge(&overload);
        assert!(!verdict.stable);
    }

    #[test]
    fn default_bounds_are_sane() {
        let params = VehicleParams::default_hexacopter();
        let plant = basic_plant(&params).unwrap();
        let (lo, hi) = default_bounds(&plant);
        assert_relative_eq!(lo[0], 0.0);
        assert_relative_eq!(hi[0], 2.0 * params.m_a * params.g);
        for i in 1..4 {
            assert!(lo[i] < 0.0 && hi[i] > 0.0);
            assert_relative_eq!(lo[i], -hi[i]);
        }
    }
}
