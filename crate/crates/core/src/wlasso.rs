//! Weighted LASSO by cyclic coordinate descent.
//!
//! The objective is the unnormalized
//!
//! ```text
//! ||y - X beta||^2 + lambda * sum_j factor_j * |beta_j|
//! ```
//!
//! with one penalty factor per feature. The all-ones penalty is the ordinary
//! LASSO. Coordinates are visited in ascending index order so results are
//! bitwise reproducible.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LassoError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("penalty factor {value} for feature {feature} is outside [0, 1]")]
    InvalidFactor { feature: usize, value: f64 },
    #[error("feature {feature} is unpenalized, so no finite lambda zeroes every coefficient; use the path API")]
    UnpenalizedFeature { feature: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("feature index {index} out of range for {n_features} features")]
    IndexOutOfRange { index: usize, n_features: usize },
    #[error("feature indices must be strictly increasing")]
    UnsortedIndices,
}

/// Per-feature penalty multipliers, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PenaltyVector(Vec<f64>);

impl PenaltyVector {
    pub fn new(factors: Vec<f64>) -> Result<Self, LassoError> {
        for (feature, &value) in factors.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(LassoError::InvalidFactor { feature, value });
            }
        }
        Ok(Self(factors))
    }

    /// The ordinary LASSO penalty.
    pub fn ones(n_features: usize) -> Self {
        Self(vec![1.0; n_features])
    }

    pub fn factors(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for PenaltyVector {
    type Error = LassoError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<PenaltyVector> for Vec<f64> {
    fn from(value: PenaltyVector) -> Self {
        value.0
    }
}

/// A sorted set of feature indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSet {
    indices: Vec<usize>,
}

impl FeatureSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates strictly increasing indices below `n_features`.
    pub fn new(indices: Vec<usize>, n_features: usize) -> Result<Self, LassoError> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LassoError::UnsortedIndices);
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= n_features) {
            return Err(LassoError::IndexOutOfRange { index, n_features });
        }
        Ok(Self { indices })
    }

    /// Support of a coefficient vector.
    pub fn support(coefficients: ArrayView1<'_, f64>) -> Self {
        Self {
            indices: coefficients
                .iter()
                .enumerate()
                .filter(|(_, &b)| b != 0.0)
                .map(|(j, _)| j)
                .collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Largest coefficient change allowed in the final sweep.
    pub tol: f64,
    /// Largest allowed violation of the optimality conditions.
    pub kkt_tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            kkt_tol: 1e-6,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub coefficients: Array1<f64>,
    pub lambda: f64,
    pub objective: f64,
    pub n_sweeps: usize,
    pub converged: bool,
}

impl LassoSolution {
    pub fn support(&self) -> FeatureSet {
        FeatureSet::support(self.coefficients.view())
    }
}

pub fn soft_threshold(z: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

fn check_problem(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    penalty: &PenaltyVector,
) -> Result<(), LassoError> {
    if y.len() != x.nrows() {
        return Err(LassoError::DimensionMismatch {
            what: "response",
            got: y.len(),
            expected: x.nrows(),
        });
    }
    if penalty.len() != x.ncols() {
        return Err(LassoError::DimensionMismatch {
            what: "penalty",
            got: penalty.len(),
            expected: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LassoError::NonFinite("design matrix"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(LassoError::NonFinite("response"));
    }
    Ok(())
}

/// Smallest lambda at which the all-zero vector is optimal.
pub fn lambda_max(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    penalty: &PenaltyVector,
) -> Result<f64, LassoError> {
    check_problem(x, y, penalty)?;
    if let Some(feature) = penalty.factors().iter().position(|&f| f == 0.0) {
        return Err(LassoError::UnpenalizedFeature { feature });
    }
    let mut max: f64 = 0.0;
    for (column, &factor) in x.axis_iter(Axis(1)).zip(penalty.factors()) {
        max = max.max(2.0 * column.dot(&y).abs() / factor);
    }
    // Inflate by a few ulps so the coordinate update at this lambda, which
    // rounds differently, still lands in the dead zone.
    Ok(max * (1.0 + 1e-14))
}

pub fn objective(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    coefficients: ArrayView1<'_, f64>,
    lambda: f64,
    penalty: &PenaltyVector,
) -> f64 {
    let residual = &y - &x.dot(&coefficients);
    let l1: f64 = coefficients
        .iter()
        .zip(penalty.factors())
        .map(|(b, f)| f * b.abs())
        .sum();
    residual.dot(&residual) + lambda * l1
}

/// Largest violation of the subgradient optimality conditions.
pub fn kkt_residual(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    coefficients: ArrayView1<'_, f64>,
    lambda: f64,
    penalty: &PenaltyVector,
) -> f64 {
    let residual = &y - &x.dot(&coefficients);
    let gradient = x.t().dot(&residual) * 2.0;
    violation(gradient.view(), coefficients, lambda, penalty.factors())
}

fn violation(
    gradient: ArrayView1<'_, f64>,
    coefficients: ArrayView1<'_, f64>,
    lambda: f64,
    factors: &[f64],
) -> f64 {
    let mut worst: f64 = 0.0;
    for ((&g, &b), &f) in gradient.iter().zip(coefficients.iter()).zip(factors) {
        let v = if b != 0.0 {
            (g - lambda * f * b.signum()).abs()
        } else {
            (g.abs() - lambda * f).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Column-major copy of the design with cached squared column norms.
struct Design {
    columns: Array2<f64>,
    sq_norms: Vec<f64>,
}

impl Design {
    fn new(x: ArrayView2<'_, f64>) -> Self {
        let columns = x.t().as_standard_layout().into_owned();
        let sq_norms = columns.outer_iter().map(|c| c.dot(&c)).collect();
        Self { columns, sq_norms }
    }

    fn residual(&self, y: ArrayView1<'_, f64>, beta: &Array1<f64>) -> Array1<f64> {
        let mut r = y.to_owned();
        for (j, column) in self.columns.outer_iter().enumerate() {
            if beta[j] != 0.0 {
                r.scaled_add(-beta[j], &column);
            }
        }
        r
    }

    fn kkt(&self, residual: &Array1<f64>, beta: &Array1<f64>, lambda: f64, factors: &[f64]) -> f64 {
        let gradient: Array1<f64> = self.columns.outer_iter().map(|c| 2.0 * c.dot(residual)).collect();
        violation(gradient.view(), beta.view(), lambda, factors)
    }

    fn objective(&self, residual: &Array1<f64>, beta: &Array1<f64>, lambda: f64, factors: &[f64]) -> f64 {
        let l1: f64 = beta.iter().zip(factors).map(|(b, f)| f * b.abs()).sum();
        residual.dot(residual) + lambda * l1
    }

    fn solve(
        &self,
        y: ArrayView1<'_, f64>,
        lambda: f64,
        factors: &[f64],
        mut beta: Array1<f64>,
        settings: &SolverSettings,
        on_sweep: &mut dyn FnMut(ArrayView1<'_, f64>),
    ) -> LassoSolution {
        let mut residual = self.residual(y, &beta);
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < settings.max_sweeps {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for (j, column) in self.columns.outer_iter().enumerate() {
                let norm = self.sq_norms[j];
                if norm == 0.0 {
                    continue;
                }
                let old = beta[j];
                let rho = column.dot(&residual) + norm * old;
                let new = soft_threshold(rho, 0.5 * lambda * factors[j]) / norm;
                if new != old {
                    residual.scaled_add(old - new, &column);
                    beta[j] = new;
                    max_change = max_change.max((new - old).abs());
                }
            }
            on_sweep(beta.view());
            if max_change <= settings.tol {
                // small steps alone do not certify optimality on slowly
                // converging instances, so also demand the KKT bound
                residual = self.residual(y, &beta);
                if self.kkt(&residual, &beta, lambda, factors) <= settings.kkt_tol {
                    converged = true;
                    break;
                }
            }
        }
        let objective = self.objective(&residual, &beta, lambda, factors);
        LassoSolution {
            coefficients: beta,
            lambda,
            objective,
            n_sweeps: sweeps,
            converged,
        }
    }
}

fn check_fit_args(
    x: ArrayView2<'_, f64>,
    lambda: f64,
    warm_start: Option<ArrayView1<'_, f64>>,
    settings: &SolverSettings,
) -> Result<(), LassoError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(LassoError::InvalidArgument(format!("lambda {lambda} must be finite and >= 0")));
    }
    if !(settings.tol > 0.0) || !(settings.kkt_tol > 0.0) {
        return Err(LassoError::InvalidArgument("tolerances must be positive".into()));
    }
    if let Some(w) = warm_start {
        if w.len() != x.ncols() {
            return Err(LassoError::DimensionMismatch {
                what: "warm start",
                got: w.len(),
                expected: x.ncols(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(LassoError::NonFinite("warm start"));
        }
    }
    Ok(())
}

/// Solves the weighted LASSO at a single lambda.
///
/// `x` is expected standardized and `y` centered. A run that exhausts
/// `max_sweeps` still returns its iterate, with `converged` cleared.
pub fn fit(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambda: f64,
    penalty: &PenaltyVector,
    warm_start: Option<ArrayView1<'_, f64>>,
    settings: &SolverSettings,
) -> Result<LassoSolution, LassoError> {
    fit_observed(x, y, lambda, penalty, warm_start, settings, |_| {})
}

/// [`fit`], calling `on_sweep` with the coefficients after every sweep.
pub fn fit_observed(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambda: f64,
    penalty: &PenaltyVector,
    warm_start: Option<ArrayView1<'_, f64>>,
    settings: &SolverSettings,
    mut on_sweep: impl FnMut(ArrayView1<'_, f64>),
) -> Result<LassoSolution, LassoError> {
    check_problem(x, y, penalty)?;
    check_fit_args(x, lambda, warm_start, settings)?;
    let start = warm_start.map_or_else(|| Array1::zeros(x.ncols()), |w| w.to_owned());
    let design = Design::new(x);
    Ok(design.solve(y, lambda, penalty.factors(), start, settings, &mut on_sweep))
}

/// Log-spaced descending grid from `lambda_max` to `lambda_max * 1e-3`.
pub fn lambda_grid(lambda_max: f64, path_len: usize) -> Vec<f64> {
    let last = (path_len - 1) as f64;
    (0..path_len)
        .map(|k| lambda_max * 10f64.powf(-3.0 * k as f64 / last))
        .collect()
}

/// Warm-started regularization path over [`lambda_grid`].
pub fn regularization_path(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    penalty: &PenaltyVector,
    path_len: usize,
    settings: &SolverSettings,
) -> Result<Vec<LassoSolution>, LassoError> {
    let mut path = Vec::with_capacity(path_len);
    walk_path(x, y, penalty, path_len, settings, |solution| {
        path.push(solution.clone());
        true
    })?;
    Ok(path)
}

fn walk_path(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    penalty: &PenaltyVector,
    path_len: usize,
    settings: &SolverSettings,
    mut visit: impl FnMut(&LassoSolution) -> bool,
) -> Result<(), LassoError> {
    if path_len < 2 {
        return Err(LassoError::InvalidArgument("path needs at least two points".into()));
    }
    let top = lambda_max(x, y, penalty)?;
    check_fit_args(x, top, None, settings)?;
    let design = Design::new(x);
    let mut beta = Array1::zeros(x.ncols());
    for lambda in lambda_grid(top, path_len) {
        let solution = design.solve(y, lambda, penalty.factors(), beta, settings, &mut |_| {});
        if !solution.converged {
            warn!("lasso path point lambda={lambda:e} stopped at max_sweeps without converging");
        }
        beta = solution.coefficients.clone();
        if !visit(&solution) {
            break;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionSettings {
    pub target_fraction: f64,
    pub path_len: usize,
    pub solver: SolverSettings,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        Self {
            target_fraction: 0.16,
            path_len: 100,
            solver: SolverSettings::default(),
        }
    }
}

/// Conditions under which a selection is still returned but deserves a
/// second look by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionFlag {
    /// The response is identically zero; nothing can be selected.
    ZeroResponse,
    /// The requested fraction rounds to zero features; one was targeted.
    TargetRoundedUp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub features: FeatureSet,
    pub lambda: f64,
    pub target: usize,
    pub flag: Option<SelectionFlag>,
}

/// Number of features a sparsity fraction asks for.
pub fn target_count(target_fraction: f64, n_features: usize) -> usize {
    (target_fraction * n_features as f64).round() as usize
}

/// Picks the support on the regularization path whose size is nearest to
/// `round(target_fraction * n_features)`; ties go to the larger lambda.
///
/// The path is cut short once the support exceeds twice the target, since
/// later points are denser still.
pub fn select_features(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    penalty: &PenaltyVector,
    settings: &SelectionSettings,
) -> Result<Selection, LassoError> {
    let fraction = settings.target_fraction;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(LassoError::InvalidArgument(format!(
            "target fraction {fraction} must lie in (0, 1)"
        )));
    }
    if settings.path_len < 20 {
        return Err(LassoError::InvalidArgument(format!(
            "path length {} is below the minimum of 20",
            settings.path_len
        )));
    }
    check_problem(x, y, penalty)?;

    let mut target = target_count(fraction, x.ncols());
    let mut flag = None;
    if target == 0 {
        target = 1;
        flag = Some(SelectionFlag::TargetRoundedUp);
    }
    if y.iter().all(|&v| v == 0.0) {
        warn!("response is identically zero; selecting no features");
        return Ok(Selection {
            features: FeatureSet::empty(),
            lambda: 0.0,
            target,
            flag: Some(SelectionFlag::ZeroResponse),
        });
    }

    let mut best: Option<(usize, FeatureSet, f64)> = None;
    walk_path(x, y, penalty, settings.path_len, &settings.solver, |solution| {
        let support = solution.support();
        let distance = support.size().abs_diff(target);
        // strict comparison keeps the earlier (larger) lambda on ties
        if best.as_ref().is_none_or(|(d, _, _)| distance < *d) {
            best = Some((distance, support.clone(), solution.lambda));
        }
        support.size() <= 2 * target
    })?;
    let (_, features, lambda) = best.expect("path has at least two points");
    Ok(Selection {
        features,
        lambda,
        target,
        flag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Columns of a scaled Hadamard-like basis: orthonormal in R^4.
    fn orthonormal_4x4() -> Array2<f64> {
        array![
            [0.5, 0.5, 0.5, 0.5],
            [0.5, -0.5, 0.5, -0.5],
            [0.5, 0.5, -0.5, -0.5],
            [0.5, -0.5, -0.5, 0.5]
        ]
    }

    fn random_problem(seed: u64, n: usize, p: usize) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array::from_shape_fn((n, p), |_| rng.random::<f64>() * 2.0 - 1.0);
        let (x, _) = crate::tabular::standardize(x.view()).unwrap();
        let mut y = Array::from_shape_fn(n, |_| rng.random::<f64>() * 2.0 - 1.0);
        let mean = y.mean().unwrap();
        y -= mean;
        (x, y)
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(1.7, 0.0), 1.7);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
    }

    #[test]
    fn lambda_max_single_column() {
        // unit-norm column with x'y = 2.4
        let x = array![[0.6], [0.8]];
        let y = array![0.6 * 2.4, 0.8 * 2.4];
        let lm = lambda_max(x.view(), y.view(), &PenaltyVector::ones(1)).unwrap();
        assert!((lm - 4.8).abs() < 1e-12);
        let lm = lambda_max(x.view(), y.view(), &PenaltyVector::new(vec![0.8]).unwrap()).unwrap();
        assert!((lm - 6.0).abs() < 1e-12);
        let zero = lambda_max(x.view(), array![0.0, 0.0].view(), &PenaltyVector::ones(1)).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn lambda_max_rejects_unpenalized_features() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let penalty = PenaltyVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(
            lambda_max(x.view(), array![1.0, -1.0].view(), &penalty),
            Err(LassoError::UnpenalizedFeature { feature: 1 })
        );
    }

    #[test]
    fn orthonormal_closed_form() {
        let x = orthonormal_4x4();
        // y = X c gives x_j'y = c_j
        let c = array![1.0, -2.5, 0.3, 0.0];
        let y = x.dot(&c);
        let solution = fit(x.view(), y.view(), 1.0, &PenaltyVector::ones(4), None, &SolverSettings::default()).unwrap();
        assert!(solution.converged);
        assert!((solution.coefficients[0] - 0.5).abs() < 1e-12);
        for j in 0..4 {
            let expected = soft_threshold(c[j], 0.5);
            assert!((solution.coefficients[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn at_lambda_max_everything_is_zero() {
        let (x, y) = random_problem(4, 25, 6);
        let penalty = PenaltyVector::new(vec![0.9, 1.0, 0.85, 0.8, 1.0, 0.95]).unwrap();
        let lm = lambda_max(x.view(), y.view(), &penalty).unwrap();
        for lambda in [lm, lm * 1.5] {
            let s = fit(x.view(), y.view(), lambda, &penalty, None, &SolverSettings::default()).unwrap();
            assert!(s.coefficients.iter().all(|&b| b == 0.0));
        }
        let s = fit(x.view(), y.view(), lm * 0.99, &penalty, None, &SolverSettings::default()).unwrap();
        assert!(s.coefficients.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn objective_field_matches_recomputation_and_kkt_holds() {
        let (x, y) = random_problem(8, 30, 8);
        let penalty = PenaltyVector::new(vec![0.8, 0.9, 1.0, 0.85, 0.95, 1.0, 0.82, 0.99]).unwrap();
        let lm = lambda_max(x.view(), y.view(), &penalty).unwrap();
        let s = fit(x.view(), y.view(), 0.2 * lm, &penalty, None, &SolverSettings::default()).unwrap();
        let recomputed = objective(x.view(), y.view(), s.coefficients.view(), s.lambda, &penalty);
        assert!(((s.objective - recomputed) / recomputed).abs() <= 1e-8);
        assert!(kkt_residual(x.view(), y.view(), s.coefficients.view(), s.lambda, &penalty) <= 1e-6);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let x = array![[1.0, f64::NAN], [0.0, 1.0]];
        let err = fit(x.view(), array![1.0, 0.0].view(), 1.0, &PenaltyVector::ones(2), None, &SolverSettings::default());
        assert_eq!(err.unwrap_err(), LassoError::NonFinite("design matrix"));
    }

    #[test]
    fn max_sweeps_clears_converged_flag() {
        let (x, y) = random_problem(1, 20, 6);
        let settings = SolverSettings { max_sweeps: 1, ..Default::default() };
        let s = fit(x.view(), y.view(), 0.01, &PenaltyVector::ones(6), None, &settings).unwrap();
        assert!(!s.converged);
        assert_eq!(s.n_sweeps, 1);
    }

    #[test]
    fn zero_factor_feature_survives() {
        let (x, y) = random_problem(6, 20, 4);
        let penalty = PenaltyVector::new(vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let huge = 1e6;
        let s = fit(x.view(), y.view(), huge, &penalty, None, &SolverSettings::default()).unwrap();
        assert!(s.coefficients[1] != 0.0);
        assert_eq!(s.support().indices(), &[1]);
    }

    #[test]
    fn selection_target_for_sixteen_percent_of_152() {
        assert_eq!(target_count(0.16, 152), 24);
    }

    #[test]
    fn selection_on_orthonormal_design_follows_correlation_order() {
        let x = orthonormal_4x4();
        // x_j'y = (1, -3, 4, 2): magnitudes rank features 2, 1, 3, 0
        let y = x.dot(&array![1.0, -3.0, 4.0, 2.0]);
        let settings = SelectionSettings { target_fraction: 0.5, ..Default::default() };
        let selection = select_features(x.view(), y.view(), &PenaltyVector::ones(4), &settings).unwrap();
        assert_eq!(selection.target, 2);
        assert_eq!(selection.features.indices(), &[1, 2]);
        assert!(selection.flag.is_none());
    }

    #[test]
    fn selection_with_zero_response_is_flagged() {
        let (x, _) = random_problem(2, 10, 5);
        let selection = select_features(x.view(), Array1::zeros(10).view(), &PenaltyVector::ones(5), &SelectionSettings::default()).unwrap();
        assert!(selection.features.is_empty());
        assert_eq!(selection.flag, Some(SelectionFlag::ZeroResponse));
    }

    #[test]
    fn tiny_fraction_targets_one_feature_with_flag() {
        let (x, y) = random_problem(3, 30, 8);
        let settings = SelectionSettings { target_fraction: 0.01, ..Default::default() };
        let selection = select_features(x.view(), y.view(), &PenaltyVector::ones(8), &settings).unwrap();
        assert_eq!(selection.flag, Some(SelectionFlag::TargetRoundedUp));
        assert!(selection.features.size() <= 1);
    }

    #[test]
    fn selection_rejects_bad_settings() {
        let (x, y) = random_problem(3, 10, 4);
        let short = SelectionSettings { path_len: 10, ..Default::default() };
        assert!(select_features(x.view(), y.view(), &PenaltyVector::ones(4), &short).is_err());
        let whole = SelectionSettings { target_fraction: 1.0, ..Default::default() };
        assert!(select_features(x.view(), y.view(), &PenaltyVector::ones(4), &whole).is_err());
    }

    #[test]
    fn feature_set_validation() {
        assert!(FeatureSet::new(vec![0, 3, 5], 6).is_ok());
        assert_eq!(FeatureSet::new(vec![0, 3, 3], 6), Err(LassoError::UnsortedIndices));
        assert_eq!(
            FeatureSet::new(vec![1, 6], 6),
            Err(LassoError::IndexOutOfRange { index: 6, n_features: 6 })
        );
    }

    #[test]
    fn penalty_vector_rejects_out_of_range() {
        assert!(PenaltyVector::new(vec![0.5, 1.2]).is_err());
        assert!(PenaltyVector::new(vec![f64::NAN]).is_err());
        let json = serde_json::to_string(&PenaltyVector::ones(2)).unwrap();
        assert_eq!(json, "[1.0,1.0]");
        assert!(serde_json::from_str::<PenaltyVector>("[1.5]").is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (u64, usize, usize, Vec<f64>, f64)> {
            (any::<u64>(), 8usize..30, 2usize..9).prop_flat_map(|(seed, n, p)| {
                (
                    Just(seed),
                    Just(n),
                    Just(p),
                    prop::collection::vec(0.8f64..=1.0, p),
                    0.01f64..0.9,
                )
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn objective_is_monotone_and_kkt_holds((seed, n, p, factors, frac) in instance()) {
                let (x, y) = random_problem(seed, n, p);
                let penalty = PenaltyVector::new(factors).unwrap();
                let lambda = frac * lambda_max(x.view(), y.view(), &penalty).unwrap();
                let mut trace = vec![objective(x.view(), y.view(), Array1::zeros(p).view(), lambda, &penalty)];
                let s = fit_observed(x.view(), y.view(), lambda, &penalty, None, &SolverSettings::default(), |b| {
                    trace.push(objective(x.view(), y.view(), b, lambda, &penalty));
                }).unwrap();
                for w in trace.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
                }
                prop_assert!(s.converged);
                prop_assert!(kkt_residual(x.view(), y.view(), s.coefficients.view(), lambda, &penalty) <= 1e-6);
            }

            #[test]
            fn penalty_scaling_is_equivariant((seed, n, p, factors, frac) in instance(), c in 1.0f64..4.0) {
                let (x, y) = random_problem(seed, n, p);
                let penalty = PenaltyVector::new(factors.clone()).unwrap();
                let scaled = PenaltyVector::new(factors.iter().map(|f| f / c).collect()).unwrap();
                let lambda = frac * lambda_max(x.view(), y.view(), &penalty).unwrap();
                let settings = SolverSettings { tol: 1e-12, kkt_tol: 1e-10, max_sweeps: 100_000 };
                let a = fit(x.view(), y.view(), lambda, &penalty, None, &settings).unwrap();
                let b = fit(x.view(), y.view(), lambda * c, &scaled, None, &settings).unwrap();
                prop_assert_eq!(a.support(), b.support());
                for (u, v) in a.coefficients.iter().zip(b.coefficients.iter()) {
                    prop_assert!((u - v).abs() <= 1e-10);
                }
            }

            #[test]
            fn warm_path_matches_cold_refits((seed, n, p, factors, _frac) in instance()) {
                let (x, y) = random_problem(seed, n, p);
                let penalty = PenaltyVector::new(factors).unwrap();
                let settings = SolverSettings::default();
                let path = regularization_path(x.view(), y.view(), &penalty, 20, &settings).unwrap();
                for point in path.iter().step_by(4) {
                    let cold = fit(x.view(), y.view(), point.lambda, &penalty, None, &settings).unwrap();
                    prop_assert!((cold.objective - point.objective).abs() <= 1e-8);
                }
            }
        }
    }
}
