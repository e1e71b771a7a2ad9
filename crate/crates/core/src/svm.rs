//! RBF-kernel support vector classifier.
//!
//! The dual is solved by sequential minimal optimization with first-order
//! working-set selection: each iteration updates the maximal KKT-violating
//! pair, ties resolved toward the lowest index. There is no shrinking and
//! no randomization, so training is a deterministic function of its inputs.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tabular::{Confusion, FoldAssignment, Metrics, TabularError};

/// Curvature floor for non-positive-definite pairs.
const TAU: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvmError {
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0} rows but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("label {0} is not one of +1/-1")]
    InvalidLabel(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("model has no support vectors")]
    EmptySupport,
    #[error("hyperparameter grid: {0}")]
    InvalidGrid(String),
    #[error("fold assignment covers {folds} subjects but the data has {rows}")]
    FoldMismatch { folds: usize, rows: usize },
    #[error("grid point (c={c}, gamma={gamma}), fold {fold}: {source}")]
    Fold {
        c: f64,
        gamma: f64,
        fold: usize,
        #[source]
        source: Box<SvmError>,
    },
    #[error(transparent)]
    Metrics(#[from] TabularError),
}

pub fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// `exp(-gamma * ||a - b||^2)`.
pub fn rbf_kernel(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, gamma: f64) -> Result<f64, SvmError> {
    if a.len() != b.len() {
        return Err(SvmError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(SvmError::InvalidHyperparameter(format!("gamma {gamma}")));
    }
    Ok((-gamma * squared_distance(a, b)).exp())
}

/// A trained classifier. Only support vectors are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    support_points: Array2<f64>,
    dual_coefficients: Array1<f64>,
    bias: f64,
    gamma: f64,
    c: f64,
    converged: bool,
}

impl SvmModel {
    pub fn new(
        support_points: Array2<f64>,
        dual_coefficients: Array1<f64>,
        bias: f64,
        gamma: f64,
        c: f64,
    ) -> Result<Self, SvmError> {
        if support_points.nrows() == 0 {
            return Err(SvmError::EmptySupport);
        }
        if support_points.nrows() != dual_coefficients.len() {
            return Err(SvmError::LengthMismatch(support_points.nrows(), dual_coefficients.len()));
        }
        check_hyperparameters(c, gamma)?;
        if !bias.is_finite() || dual_coefficients.iter().any(|a| !a.is_finite()) {
            return Err(SvmError::NonFinite("model"));
        }
        if let Some(a) = dual_coefficients.iter().find(|a| a.abs() > c * (1.0 + 1e-12)) {
            return Err(SvmError::InvalidHyperparameter(format!(
                "dual coefficient {a} exceeds c = {c}"
            )));
        }
        Ok(Self {
            support_points,
            dual_coefficients,
            bias,
            gamma,
            c,
            converged: true,
        })
    }

    pub fn support_points(&self) -> ArrayView2<'_, f64> {
        self.support_points.view()
    }

    /// `alpha_i * y_i` per support vector.
    pub fn dual_coefficients(&self) -> ArrayView1<'_, f64> {
        self.dual_coefficients.view()
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// False when training hit its iteration cap.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn n_features(&self) -> usize {
        self.support_points.ncols()
    }

    pub fn decision_values(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, SvmError> {
        if x.ncols() != self.n_features() {
            return Err(SvmError::DimensionMismatch {
                expected: self.n_features(),
                got: x.ncols(),
            });
        }
        Ok(x.outer_iter()
            .map(|row| {
                let mut value = self.bias;
                for (sv, &coef) in self.support_points.outer_iter().zip(&self.dual_coefficients) {
                    value += coef * (-self.gamma * squared_distance(sv, row)).exp();
                }
                value
            })
            .collect())
    }

    /// Sign of the decision function; exactly zero maps to `+1`.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, SvmError> {
        Ok(self
            .decision_values(x)?
            .mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoSettings {
    /// Stop when the maximal violating pair's gap drops below this.
    pub tol: f64,
    /// Iteration cap, in multiples of the number of training points.
    pub max_passes: usize,
}

impl Default for SmoSettings {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_passes: 2_000,
        }
    }
}

fn check_hyperparameters(c: f64, gamma: f64) -> Result<(), SvmError> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(SvmError::InvalidHyperparameter(format!("c {c}")));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(SvmError::InvalidHyperparameter(format!("gamma {gamma}")));
    }
    Ok(())
}

fn check_training_data(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> Result<(), SvmError> {
    if x.nrows() != y.len() {
        return Err(SvmError::LengthMismatch(x.nrows(), y.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SvmError::NonFinite("training data"));
    }
    if let Some(&bad) = y.iter().find(|&&l| l != 1.0 && l != -1.0) {
        return Err(SvmError::InvalidLabel(bad));
    }
    if !y.iter().any(|&l| l == 1.0) || !y.iter().any(|&l| l == -1.0) {
        return Err(SvmError::SingleClass);
    }
    Ok(())
}

fn pairwise_squared_distances(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            let v = squared_distance(x.row(i), x.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

struct DualSolution {
    alpha: Array1<f64>,
    bias: f64,
    converged: bool,
}

/// SMO on a precomputed kernel matrix.
fn solve_dual(kernel: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, c: f64, settings: &SmoSettings) -> DualSolution {
    let n = y.len();
    let mut alpha = Array1::<f64>::zeros(n);
    // gradient of the dual objective: G = Q alpha - 1
    let mut grad = Array1::<f64>::from_elem(n, -1.0);
    let max_iter = settings.max_passes.saturating_mul(n).max(1);

    let in_up = |t: usize, a: f64| (y[t] > 0.0 && a < c) || (y[t] < 0.0 && a > 0.0);
    let in_low = |t: usize, a: f64| (y[t] > 0.0 && a > 0.0) || (y[t] < 0.0 && a < c);

    let mut converged = false;
    for _ in 0..max_iter {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(t, alpha[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if in_low(t, alpha[t]) && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < settings.tol {
            converged = true;
            break;
        }

        let q_ii = kernel[[i, i]];
        let q_jj = kernel[[j, j]];
        let q_ij = y[i] * y[j] * kernel[[i, j]];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q_ii + q_jj + 2.0 * q_ij).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q_ii + q_jj - 2.0 * q_ij).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let d_i = alpha[i] - old_i;
        let d_j = alpha[j] - old_j;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * kernel[[t, i]] * d_i + y[j] * kernel[[t, j]] * d_j);
        }
    }

    // rho from the free vectors, or the midpoint of the feasible interval
    let mut upper = f64::INFINITY;
    let mut lower = f64::NEG_INFINITY;
    let mut free_sum = 0.0;
    let mut free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        let at_upper = alpha[t] >= c;
        let at_lower = alpha[t] <= 0.0;
        if at_upper {
            if y[t] < 0.0 {
                upper = upper.min(yg);
            } else {
                lower = lower.max(yg);
            }
        } else if at_lower {
            if y[t] > 0.0 {
                upper = upper.min(yg);
            } else {
                lower = lower.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 {
        free_sum / free as f64
    } else {
        (upper + lower) / 2.0
    };
    DualSolution {
        alpha,
        bias: -rho,
        converged,
    }
}

fn model_from_dual(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    dual: DualSolution,
    c: f64,
    gamma: f64,
) -> Result<SvmModel, SvmError> {
    let support: Vec<usize> = (0..y.len()).filter(|&t| dual.alpha[t] > 0.0).collect();
    let points = x.select(Axis(0), &support);
    let coefficients: Array1<f64> = support.iter().map(|&t| dual.alpha[t] * y[t]).collect();
    let mut model = SvmModel::new(points, coefficients, dual.bias, gamma, c)?;
    if !dual.converged {
        warn!("SMO hit its iteration cap at c={c}, gamma={gamma}");
    }
    model.converged = dual.converged;
    Ok(model)
}

/// Trains a C-SVC with an RBF kernel.
pub fn smo_train(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    c: f64,
    gamma: f64,
    settings: &SmoSettings,
) -> Result<SvmModel, SvmError> {
    check_hyperparameters(c, gamma)?;
    check_training_data(x, y)?;
    let kernel = pairwise_squared_distances(x).mapv(|d| (-gamma * d).exp());
    let dual = solve_dual(kernel.view(), y, c, settings);
    model_from_dual(x, y, dual, c, gamma)
}

/// Candidate hyperparameters, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid")]
pub struct HyperGrid {
    c_values: Vec<f64>,
    gamma_values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawGrid {
    c_values: Vec<f64>,
    gamma_values: Vec<f64>,
}

impl TryFrom<RawGrid> for HyperGrid {
    type Error = SvmError;

    fn try_from(raw: RawGrid) -> Result<Self, SvmError> {
        HyperGrid::new(raw.c_values, raw.gamma_values)
    }
}

impl HyperGrid {
    pub fn new(c_values: Vec<f64>, gamma_values: Vec<f64>) -> Result<Self, SvmError> {
        for (name, values) in [("c_values", &c_values), ("gamma_values", &gamma_values)] {
            if values.is_empty() {
                return Err(SvmError::InvalidGrid(format!("{name} is empty")));
            }
            if values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(SvmError::InvalidGrid(format!("{name} must be positive and finite")));
            }
            if values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SvmError::InvalidGrid(format!("{name} must be strictly ascending")));
            }
        }
        Ok(Self {
            c_values,
            gamma_values,
        })
    }

    pub fn c_values(&self) -> &[f64] {
        &self.c_values
    }

    pub fn gamma_values(&self) -> &[f64] {
        &self.gamma_values
    }

    pub fn len(&self) -> usize {
        self.c_values.len() * self.gamma_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for HyperGrid {
    /// `c` in 2^-5, 2^-3, ..., 2^15 and `gamma` in 2^-15, 2^-13, ..., 2^3.
    fn default() -> Self {
        let powers = |from: i32, to: i32| (from..=to).step_by(2).map(|e| 2f64.powi(e)).collect();
        Self {
            c_values: powers(-5, 15),
            gamma_values: powers(-15, 3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridResult {
    pub c: f64,
    pub gamma: f64,
    pub metrics: Metrics,
    pub confusion: Confusion,
}

fn fold_confusion(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    kernel: ArrayView2<'_, f64>,
    c: f64,
    gamma: f64,
    folds: &FoldAssignment,
    settings: &SmoSettings,
) -> Result<Confusion, SvmError> {
    let mut pooled = Confusion::default();
    for fold in 0..folds.k() {
        let context = |source: SvmError| SvmError::Fold {
            c,
            gamma,
            fold,
            source: Box::new(source),
        };
        let (train, test) = folds.split(fold);
        let y_train = y.select(Axis(0), &train);
        check_training_data(x.select(Axis(0), &train).view(), y_train.view()).map_err(context)?;
        let k_train = kernel.select(Axis(0), &train).select(Axis(1), &train);
        let dual = solve_dual(k_train.view(), y_train.view(), c, settings);
        let model = model_from_dual(x.select(Axis(0), &train).view(), y_train.view(), dual, c, gamma)
            .map_err(context)?;
        let predicted = model.predict(x.select(Axis(0), &test).view()).map_err(context)?;
        let actual = y.select(Axis(0), &test);
        pooled = pooled + Confusion::tally(predicted.view(), actual.view())?;
    }
    Ok(pooled)
}

fn check_folds(x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, folds: &FoldAssignment) -> Result<(), SvmError> {
    if x.nrows() != y.len() {
        return Err(SvmError::LengthMismatch(x.nrows(), y.len()));
    }
    if folds.n_subjects() != y.len() {
        return Err(SvmError::FoldMismatch {
            folds: folds.n_subjects(),
            rows: y.len(),
        });
    }
    Ok(())
}

/// Pooled confusion counts of k-fold cross-validation at one grid point.
pub fn cross_validate(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    c: f64,
    gamma: f64,
    folds: &FoldAssignment,
    settings: &SmoSettings,
) -> Result<Confusion, SvmError> {
    check_hyperparameters(c, gamma)?;
    check_folds(x, y, folds)?;
    let kernel = pairwise_squared_distances(x).mapv(|d| (-gamma * d).exp());
    fold_confusion(x, y, kernel.view(), c, gamma, folds, settings)
}

/// Cross-validates every grid point and returns the most accurate one.
///
/// Confusion counts are pooled over folds before computing metrics. Ties
/// go to the smaller `c`, then the smaller `gamma`. Grid points are
/// evaluated in parallel; the result does not depend on scheduling.
pub fn grid_search_cv(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    grid: &HyperGrid,
    folds: &FoldAssignment,
    settings: &SmoSettings,
) -> Result<GridResult, SvmError> {
    check_folds(x, y, folds)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SvmError::NonFinite("training data"));
    }
    let distances = pairwise_squared_distances(x);
    let points: Vec<(f64, f64)> = grid
        .c_values()
        .iter()
        .flat_map(|&c| grid.gamma_values().iter().map(move |&g| (c, g)))
        .collect();

    let kernels: Vec<Array2<f64>> = grid
        .gamma_values()
        .par_iter()
        .map(|&gamma| distances.mapv(|d| (-gamma * d).exp()))
        .collect();
    let n_gamma = grid.gamma_values().len();
    let outcomes: Vec<Result<Confusion, SvmError>> = points
        .par_iter()
        .enumerate()
        .map(|(p, &(c, gamma))| fold_confusion(x, y, kernels[p % n_gamma].view(), c, gamma, folds, settings))
        .collect();

    let mut best: Option<GridResult> = None;
    for (&(c, gamma), outcome) in points.iter().zip(outcomes) {
        let confusion = outcome?;
        let metrics = confusion.metrics()?;
        // grid order is (c asc, gamma asc); strict > keeps the earliest tie
        if best.is_none_or(|b| metrics.accuracy > b.metrics.accuracy) {
            best = Some(GridResult {
                c,
                gamma,
                metrics,
                confusion,
            });
        }
    }
    Ok(best.expect("grid is nonempty"))
}
