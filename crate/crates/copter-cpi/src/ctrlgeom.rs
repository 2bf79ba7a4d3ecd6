//! Geometry of the attainable control set and the control authority margin.
//!
//! The attainable control set is the zonotope `Ω = {Hμ : μ in box}`. The
//! available control authority index (ACAI) is the signed distance from a
//! point to the boundary of `Ω`: positive inside, nonpositive outside.
//! The closed form enumerates the facet normals of the zonotope; a sampling
//! oracle over support functions provides an independent cross-check.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Relative singular-value threshold for rank decisions.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum GeomError {
    #[error("box constraint invalid: lower[{index}] = {lower} > upper[{index}] = {upper}")]
    BoxOrder { index: usize, lower: f64, upper: f64 },
    #[error("box constraint has non-finite entry at index {0}")]
    BoxNotFinite(usize),
    #[error("dimension mismatch: H has {h_cols} columns, box has {box_dim} entries")]
    DimensionMismatch { h_cols: usize, box_dim: usize },
    #[error("H must have at least as many columns as rows (n = {n}, m = {m})")]
    TooFewInputs { n: usize, m: usize },
    #[error("closed-form inapplicable: rank(H) = {rank} < n = {n}")]
    RankDeficient { rank: usize, n: usize },
    #[error("direction vector must be nonzero")]
    ZeroDirection,
}

/// Per-axis interval bounds on the raw input vector μ.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraint {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxConstraint {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, GeomError> {
        assert_eq!(lower.len(), upper.len(), "bound vectors must match in length");
        for i in 0..lower.len() {
            if !lower[i].is_finite() || !upper[i].is_finite() {
                return Err(GeomError::BoxNotFinite(i));
            }
            if lower[i] > upper[i] {
                return Err(GeomError::BoxOrder { index: i, lower: lower[i], upper: upper[i] });
            }
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric box `[-half, half]` per axis.
    pub fn symmetric(half_widths: &[f64]) -> Result<Self, GeomError> {
        let upper = DVector::from_column_slice(half_widths);
        Self::new(-upper.clone(), upper)
    }

    /// Box `[0, k_i]` per axis, the unidirectional-thrust case.
    pub fn thrust(max_thrusts: &[f64]) -> Result<Self, GeomError> {
        let upper = DVector::from_column_slice(max_thrusts);
        Self::new(DVector::zeros(upper.len()), upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn midpoint(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn ranges(&self) -> DVector<f64> {
        &self.upper - &self.lower
    }

    pub fn contains(&self, mu: &DVector<f64>) -> bool {
        (0..self.dim()).all(|i| self.lower[i] <= mu[i] && mu[i] <= self.upper[i])
    }
}

/// One way of splitting the columns of H into n-1 kept columns (spanning a
/// candidate facet) and the remaining m+1-n columns.
#[derive(Debug, Clone)]
pub struct FacetPartition {
    /// Column indices forming `H1j` (the facet-spanning columns).
    pub kept_indices: Vec<usize>,
    /// The complementary column indices forming `H2j`.
    pub remaining_indices: Vec<usize>,
    /// Unit normal of the facet slab; absent when the kept columns are
    /// rank-deficient and define no facet.
    pub xi: Option<DVector<f64>>,
}

/// Precomputed per-partition data: the slab half-width around the center.
#[derive(Debug, Clone)]
struct FacetSlab {
    xi: DVector<f64>,
    half_width: f64,
}

/// The attainable control set `Ω = {Hμ : μ in box}` with facet data cached
/// at construction.
#[derive(Debug, Clone)]
pub struct ControlSet {
    h: DMatrix<f64>,
    bounds: BoxConstraint,
    center: DVector<f64>,
    partitions: Vec<FacetPartition>,
    slabs: Vec<(usize, FacetSlab)>,
    max_acai: f64,
}

impl ControlSet {
    pub fn new(h: DMatrix<f64>, bounds: BoxConstraint) -> Result<Self, GeomError> {
        let (n, m) = h.shape();
        if m != bounds.dim() {
            return Err(GeomError::DimensionMismatch { h_cols: m, box_dim: bounds.dim() });
        }
        if m < n {
            return Err(GeomError::TooFewInputs { n, m });
        }
        let rank = numeric_rank(&h);
        if rank < n {
            return Err(GeomError::RankDeficient { rank, n });
        }

        let center = &h * bounds.midpoint();
        let ranges = bounds.ranges();
        let partitions = enumerate_partitions_of(&h);
        let mut slabs = Vec::new();
        for (j, part) in partitions.iter().enumerate() {
            let Some(xi) = &part.xi else { continue };
            let mut half_width = 0.0;
            for &k in &part.remaining_indices {
                half_width += 0.5 * (xi.dot(&h.column(k).into_owned())).abs() * ranges[k];
            }
            slabs.push((j, FacetSlab { xi: xi.clone(), half_width }));
        }
        // rank(H) = n guarantees at least one full-rank kept set.
        debug_assert!(!slabs.is_empty());
        let max_acai = slabs
            .iter()
            .map(|(_, s)| s.half_width)
            .fold(f64::INFINITY, f64::min);

        Ok(Self { h, bounds, center, partitions, slabs, max_acai })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn bounds(&self) -> &BoxConstraint {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.h.ncols()
    }

    /// Center of Ω, the image of the box midpoint.
    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    /// All column partitions, in lexicographic order of the kept index set.
    pub fn partitions(&self) -> &[FacetPartition] {
        &self.partitions
    }

    /// ACAI of the point `d`: minimum over facet slabs of the slab half-width
    /// minus the offset of `d` from the slab center plane. Positive iff `d`
    /// is interior to Ω.
    pub fn acai(&self, d: &DVector<f64>) -> f64 {
        self.acai_with_argmin(d).0
    }

    /// ACAI together with the index of the arg-min partition, for diagnostics.
    pub fn acai_with_argmin(&self, d: &DVector<f64>) -> (f64, usize) {
        assert_eq!(d.len(), self.dim(), "disturbance dimension mismatch");
        let offset = &self.center - d;
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for (j, slab) in &self.slabs {
            let dj = slab.half_width - slab.xi.dot(&offset).abs();
            if dj < best {
                best = dj;
                best_j = *j;
            }
        }
        (best, best_j)
    }

    /// Maximum ACAI over all points, attained at the center of Ω.
    pub fn max_acai(&self) -> f64 {
        self.max_acai
    }

    /// Support function of Ω in direction `g`.
    pub fn support_function(&self, g: &DVector<f64>) -> Result<f64, GeomError> {
        if g.norm() < f64::MIN_POSITIVE.sqrt() {
            return Err(GeomError::ZeroDirection);
        }
        let ranges = self.bounds.ranges();
        let mut half = 0.0;
        for k in 0..self.input_dim() {
            half += 0.5 * g.dot(&self.h.column(k).into_owned()).abs() * ranges[k];
        }
        Ok(g.dot(&self.center) + half)
    }

    /// Sampling upper bound on the boundary distance of an interior point:
    /// the minimum of `support(g) - g·d` over `n_dirs` random unit
    /// directions, sharpened by a local search around the best direction
    /// found. Every evaluated direction gives a valid upper bound, so the
    /// result converges to the ACAI from above as `n_dirs` grows.
    pub fn acai_oracle(&self, d: &DVector<f64>, n_dirs: usize, seed: u64) -> f64 {
        let n = self.dim();
        if n == 1 {
            // only two unit directions exist in 1-D
            let pos = DVector::from_element(1, 1.0);
            let neg = DVector::from_element(1, -1.0);
            let a = self.support_function(&pos).unwrap() - pos.dot(d);
            let b = self.support_function(&neg).unwrap() - neg.dot(d);
            return a.min(b);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        let mut best = f64::INFINITY;
        let mut best_dir = DVector::zeros(n);
        // global scan: most of the budget goes on coarse coverage
        let coarse = n_dirs - n_dirs / 5;
        for _ in 0..coarse {
            let mut g = DVector::from_fn(n, |_, _| normal.sample(&mut rng));
            let norm = g.norm();
            if norm < 1e-12 {
                continue;
            }
            g /= norm;
            let dist = self.support_function(&g).unwrap() - g.dot(d);
            if dist < best {
                best = dist;
                best_dir = g;
            }
        }
        // local search: Gaussian perturbations of the incumbent, with a
        // scale that halves whenever a round fails to improve
        let rounds = 24;
        let per_round = ((n_dirs - coarse) / rounds).max(1);
        let mut scale = 0.3;
        for _ in 0..rounds {
            let mut improved = false;
            for _ in 0..per_round {
                let step: DVector<f64> =
                    DVector::from_fn(n, |_, _| normal.sample(&mut rng));
                let mut g = &best_dir + scale * step;
                let norm = g.norm();
                if norm < 1e-12 {
                    continue;
                }
                g /= norm;
                let dist = self.support_function(&g).unwrap() - g.dot(d);
                if dist < best {
                    best = dist;
                    best_dir = g;
                    improved = true;
                }
            }
            if !improved {
                scale *= 0.5;
            }
        }
        best
    }
}

/// Numeric rank via singular values with a relative threshold.
pub fn numeric_rank(mat: &DMatrix<f64>) -> usize {
    if mat.nrows() == 0 || mat.ncols() == 0 {
        return 0;
    }
    let sv = mat.clone().singular_values();
    let max_sv = sv.max();
    if max_sv <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max_sv).count()
}

/// Unit vector orthogonal to all columns of `h1j`, or `None` when the
/// columns do not span an (n-1)-dimensional subspace. The sign is fixed so
/// the first entry above tolerance is positive.
pub fn null_direction(h1j: &DMatrix<f64>) -> Option<DVector<f64>> {
    let (n, cols) = h1j.shape();
    assert!(cols + 1 == n || cols < n, "expected n x (n-1) input");
    if cols > 0 && numeric_rank(h1j) < cols {
        return None;
    }
    let mut v = if cols == 0 {
        let mut e = DVector::zeros(n);
        e[0] = 1.0;
        e
    } else {
        let q = h1j.clone().qr().q();
        // residual of the standard basis vector least explained by the columns
        let mut best: Option<DVector<f64>> = None;
        let mut best_norm = 0.0;
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            // two projection passes for orthogonality well below tolerance
            let mut r = &e - &q * (q.transpose() * &e);
            r = &r - &q * (q.transpose() * &r);
            let norm = r.norm();
            if norm > best_norm {
                best_norm = norm;
                best = Some(r / norm);
            }
        }
        best?
    };
    // sign convention: first entry of meaningful magnitude is positive
    for i in 0..n {
        if v[i].abs() > 1e-9 {
            if v[i] < 0.0 {
                v = -v;
            }
            break;
        }
    }
    Some(v)
}

/// Number of column partitions, `C(m, n-1)`.
pub fn partition_count(n: usize, m: usize) -> usize {
    binomial(m, n - 1)
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

fn enumerate_partitions_of(h: &DMatrix<f64>) -> Vec<FacetPartition> {
    let (n, m) = h.shape();
    (0..m)
        .combinations(n - 1)
        .map(|kept| {
            let remaining: Vec<usize> = (0..m).filter(|i| !kept.contains(i)).collect();
            let h1j = DMatrix::from_fn(n, kept.len(), |r, c| h[(r, kept[c])]);
            let xi = null_direction(&h1j);
            FacetPartition { kept_indices: kept, remaining_indices: remaining, xi }
        })
        .collect()
}
