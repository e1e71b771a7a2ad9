//! Per-site tabular data: the subject table, covariate residualization,
//! standardization, classification metrics and stratified folds.
//!
//! Everything here is a pure function of its inputs. A site applies
//! [`residualize`] and then [`SubjectTable::standardized`] once before the
//! protocol starts; the resulting table is frozen for all rounds.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Names of the covariate columns, in storage order.
pub const COVARIATE_NAMES: [&str; 3] = ["age", "sex", "icv"];

const PATIENT: f64 = 1.0;
const CONTROL: f64 = -1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TabularError {
    #[error("site {site}: {reason}")]
    InvalidTable { site: String, reason: String },
    #[error("degenerate covariate design: column `{column}` is linearly dependent on the preceding columns")]
    DegenerateDesign { column: &'static str },
    #[error("column {column} is constant (sample sd {sd:e})")]
    ConstantColumn { column: usize, sd: f64 },
    #[error("feature `{name}` is constant at site {site}; drop it from every site before starting")]
    ConstantFeature { site: String, name: String },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("label {0} is not one of +1/-1")]
    InvalidLabel(f64),
    #[error("{0} is undefined: the actual labels contain a single class")]
    SingleClass(&'static str),
    #[error("cannot build {k} folds: {reason}")]
    InvalidFolds { k: usize, reason: String },
}

/// One site's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTable {
    site_id: String,
    subject_ids: Vec<String>,
    feature_names: Vec<String>,
    features: Array2<f64>,
    covariates: Array2<f64>,
    labels: Array1<f64>,
}

impl SubjectTable {
    /// Builds a validated table.
    ///
    /// Covariates are `[age, sex, icv]` per subject, labels are `+1` for
    /// patients and `-1` for controls.
    pub fn new(
        site_id: impl Into<String>,
        subject_ids: Vec<String>,
        feature_names: Vec<String>,
        features: Array2<f64>,
        covariates: Array2<f64>,
        labels: Array1<f64>,
    ) -> Result<Self, TabularError> {
        let site_id = site_id.into();
        let invalid = |reason: String| TabularError::InvalidTable {
            site: site_id.clone(),
            reason,
        };
        let n = labels.len();
        if n < 4 {
            return Err(invalid(format!("{n} subjects, need at least 4")));
        }
        if features.nrows() != n || covariates.nrows() != n || subject_ids.len() != n {
            return Err(invalid(format!(
                "row counts disagree: labels {n}, features {}, covariates {}, ids {}",
                features.nrows(),
                covariates.nrows(),
                subject_ids.len()
            )));
        }
        if covariates.ncols() != COVARIATE_NAMES.len() {
            return Err(invalid(format!(
                "expected 3 covariate columns, got {}",
                covariates.ncols()
            )));
        }
        if features.ncols() != feature_names.len() || feature_names.is_empty() {
            return Err(invalid(format!(
                "{} feature columns but {} feature names",
                features.ncols(),
                feature_names.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = feature_names.iter().find(|name| !seen.insert(name.as_str())) {
            return Err(invalid(format!("duplicate feature name `{dup}`")));
        }
        if features.iter().chain(covariates.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite matrix entry".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != PATIENT && l != CONTROL) {
            return Err(invalid(format!("label {bad} is not one of +1/-1")));
        }
        if !labels.iter().any(|&l| l == PATIENT) || !labels.iter().any(|&l| l == CONTROL) {
            return Err(invalid("both label classes must be present".into()));
        }
        Ok(Self {
            site_id,
            subject_ids,
            feature_names,
            features,
            covariates,
            labels,
        })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn covariates(&self) -> ArrayView2<'_, f64> {
        self.covariates.view()
    }

    pub fn labels(&self) -> ArrayView1<'_, f64> {
        self.labels.view()
    }

    pub fn n_subjects(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn with_features(&self, features: Array2<f64>) -> Self {
        Self {
            features,
            ..self.clone()
        }
    }

    /// Standardizes the feature block, naming the offending feature when a
    /// column is constant.
    pub fn standardized(&self) -> Result<(Self, Standardization), TabularError> {
        let (features, transform) = standardize(self.features.view()).map_err(|e| match e {
            TabularError::ConstantColumn { column, .. } => TabularError::ConstantFeature {
                site: self.site_id.clone(),
                name: self.feature_names[column].clone(),
            },
            other => other,
        })?;
        Ok((self.with_features(features), transform))
    }
}

/// Orthonormal basis of the intercept-augmented covariate design, built by
/// modified Gram-Schmidt with one reorthogonalization pass.
fn covariate_basis(covariates: ArrayView2<'_, f64>) -> Result<Vec<Array1<f64>>, TabularError> {
    let n = covariates.nrows();
    let mut columns: Vec<(&'static str, Array1<f64>)> = vec![("intercept", Array1::ones(n))];
    for (j, name) in COVARIATE_NAMES.iter().enumerate() {
        columns.push((name, covariates.column(j).to_owned()));
    }

    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(columns.len());
    for (name, mut v) in columns {
        let original = v.dot(&v).sqrt();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.scaled_add(-proj, q);
            }
        }
        let remaining = v.dot(&v).sqrt();
        if original == 0.0 || remaining <= 1e-10 * original {
            return Err(TabularError::DegenerateDesign { column: name });
        }
        v /= remaining;
        basis.push(v);
    }
    Ok(basis)
}

/// Replaces every feature column by its residuals from an ordinary least
/// squares fit on `[1, age, sex, icv]` over all subjects at the site.
pub fn residualize(table: &SubjectTable) -> Result<SubjectTable, TabularError> {
    let basis = covariate_basis(table.covariates.view())?;
    let mut features = table.features.clone();
    for mut column in features.axis_iter_mut(Axis(1)) {
        let mut r = column.to_owned();
        // Projecting twice keeps residuals orthogonal to the design to
        // working precision even when the column is nearly explained.
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&r);
                r.scaled_add(-proj, q);
            }
        }
        column.assign(&r);
    }
    Ok(table.with_features(features))
}

/// Per-column location and scale returned by [`standardize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub means: Array1<f64>,
    pub scales: Array1<f64>,
}

impl Standardization {
    /// Inverts [`standardize`].
    pub fn unstandardize(&self, standardized: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = standardized.to_owned();
        for (j, mut column) in out.axis_iter_mut(Axis(1)).enumerate() {
            column.mapv_inplace(|v| v * self.scales[j] + self.means[j]);
        }
        out
    }
}

/// Centers each column and scales it to unit sample standard deviation.
pub fn standardize(
    matrix: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Standardization), TabularError> {
    let n = matrix.nrows();
    if n < 2 {
        return Err(TabularError::LengthMismatch { left: n, right: 2 });
    }
    let mut out = matrix.to_owned();
    let mut means = Array1::zeros(matrix.ncols());
    let mut scales = Array1::zeros(matrix.ncols());
    for (j, mut column) in out.axis_iter_mut(Axis(1)).enumerate() {
        let mean = column.sum() / n as f64;
        column.mapv_inplace(|v| v - mean);
        // second centering pass removes the rounding left by the first
        let drift = column.sum() / n as f64;
        column.mapv_inplace(|v| v - drift);
        let sd = (column.dot(&column) / (n - 1) as f64).sqrt();
        if !(sd > 1e-12) {
            return Err(TabularError::ConstantColumn { column: j, sd });
        }
        column.mapv_inplace(|v| v / sd);
        means[j] = mean + drift;
        scales[j] = sd;
    }
    Ok((out, Standardization { means, scales }))
}

/// Accuracy, specificity and sensitivity, with patients (+1) as positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub specificity: f64,
    pub sensitivity: f64,
}

impl Metrics {
    /// The state of a site before its first accepted evaluation.
    pub const ZERO: Metrics = Metrics {
        accuracy: 0.0,
        specificity: 0.0,
        sensitivity: 0.0,
    };

    pub fn is_valid(&self) -> bool {
        [self.accuracy, self.specificity, self.sensitivity]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }
}

/// Confusion counts; poolable across folds by addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl Confusion {
    pub fn tally(
        predicted: ArrayView1<'_, f64>,
        actual: ArrayView1<'_, f64>,
    ) -> Result<Self, TabularError> {
        if predicted.len() != actual.len() {
            return Err(TabularError::LengthMismatch {
                left: predicted.len(),
                right: actual.len(),
            });
        }
        let mut counts = Confusion::default();
        for (&p, &a) in predicted.iter().zip(actual.iter()) {
            for label in [p, a] {
                if label != PATIENT && label != CONTROL {
                    return Err(TabularError::InvalidLabel(label));
                }
            }
            match (a == PATIENT, p == PATIENT) {
                (true, true) => counts.true_positive += 1,
                (true, false) => counts.false_negative += 1,
                (false, true) => counts.false_positive += 1,
                (false, false) => counts.true_negative += 1,
            }
        }
        Ok(counts)
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }

    pub fn metrics(&self) -> Result<Metrics, TabularError> {
        let positives = self.true_positive + self.false_negative;
        let negatives = self.true_negative + self.false_positive;
        if positives == 0 {
            return Err(TabularError::SingleClass("sensitivity"));
        }
        if negatives == 0 {
            return Err(TabularError::SingleClass("specificity"));
        }
        Ok(Metrics {
            accuracy: (self.true_positive + self.true_negative) as f64 / self.total() as f64,
            specificity: self.true_negative as f64 / negatives as f64,
            sensitivity: self.true_positive as f64 / positives as f64,
        })
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, rhs: Confusion) -> Confusion {
        Confusion {
            true_positive: self.true_positive + rhs.true_positive,
            true_negative: self.true_negative + rhs.true_negative,
            false_positive: self.false_positive + rhs.false_positive,
            false_negative: self.false_negative + rhs.false_negative,
        }
    }
}

pub fn confusion_metrics(
    predicted: ArrayView1<'_, f64>,
    actual: ArrayView1<'_, f64>,
) -> Result<Metrics, TabularError> {
    Confusion::tally(predicted, actual)?.metrics()
}

/// Fold index per subject for stratified k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of_subject: Vec<usize>,
    k: usize,
    seed: u64,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold_of_subject(&self) -> &[usize] {
        &self.fold_of_subject
    }

    pub fn n_subjects(&self) -> usize {
        self.fold_of_subject.len()
    }

    /// Training and held-out subject indices for `fold`, both ascending.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..self.fold_of_subject.len()).partition(|&i| self.fold_of_subject[i] == fold);
        (train, test)
    }
}

/// Shuffles each class with a seeded generator and deals it round-robin
/// over the folds. Negatives continue dealing where positives stopped so
/// fold sizes also differ by at most one.
///
/// Requires the larger class to have at least `k` members and the smaller
/// at least two.
pub fn stratified_folds(
    labels: ArrayView1<'_, f64>,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, TabularError> {
    let invalid = |reason: String| TabularError::InvalidFolds { k, reason };
    if k < 2 {
        return Err(invalid("k must be at least 2".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != PATIENT && l != CONTROL) {
        return Err(TabularError::InvalidLabel(bad));
    }
    let mut positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == PATIENT).collect();
    let mut negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == CONTROL).collect();
    // Every fold must be nonempty and every training split must see both
    // classes.
    if positives.len().max(negatives.len()) < k || positives.len().min(negatives.len()) < 2 {
        return Err(invalid(format!(
            "classes have {} positives and {} negatives",
            positives.len(),
            negatives.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    let mut fold_of_subject = vec![0; labels.len()];
    for (slot, &i) in positives.iter().chain(negatives.iter()).enumerate() {
        fold_of_subject[i] = slot % k;
    }
    Ok(FoldAssignment {
        fold_of_subject,
        k,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::Rng;

    fn table_with(features: Array2<f64>, covariates: Array2<f64>) -> SubjectTable {
        let n = features.nrows();
        let labels = Array1::from_iter((0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }));
        SubjectTable::new(
            "s1",
            (0..n).map(|i| format!("sub{i}")).collect(),
            (0..features.ncols()).map(|j| format!("f{j}")).collect(),
            features,
            covariates,
            labels,
        )
        .unwrap()
    }

    fn random_covariates(n: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array::from_shape_fn((n, 3), |(i, j)| match j {
            0 => 20.0 + 50.0 * rng.random::<f64>(),
            1 => (i % 2) as f64,
            _ => 1.2e6 + 3e5 * rng.random::<f64>(),
        })
    }

    #[test]
    fn feature_explained_by_age_residualizes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_covariates(12, &mut rng);
        let feat = cov.column(0).mapv(|a| 2.0 * a + 5.0).insert_axis(Axis(1));
        let out = residualize(&table_with(feat, cov)).unwrap();
        assert!(out.features().iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn feature_orthogonal_to_covariates_only_loses_its_mean() {
        // rows 0..4 and 4..8 repeat the covariates; a feature that is
        // +d on the first copy and -d on the second is orthogonal to the
        // centered covariates.
        let base = array![[30.0, 0.0, 1.1e6], [45.0, 1.0, 1.4e6], [52.0, 0.0, 1.3e6], [61.0, 1.0, 1.2e6]];
        let cov = ndarray::concatenate![Axis(0), base, base];
        let feat = array![[3.0], [1.0], [-2.0], [0.5], [-1.0], [1.0], [4.0], [1.5]];
        let mean = feat.mean().unwrap();
        let out = residualize(&table_with(feat.clone(), cov)).unwrap();
        for (o, f) in out.features().iter().zip(feat.iter()) {
            assert!((o - (f - mean)).abs() <= 1e-10, "{o} vs {}", f - mean);
        }
    }

    #[test]
    fn residuals_are_orthogonal_and_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cov = random_covariates(20, &mut rng);
        let feat = Array::from_shape_fn((20, 5), |_| rng.random::<f64>() * 10.0 - 5.0);
        let out = residualize(&table_with(feat, cov.clone())).unwrap();
        for column in out.features().axis_iter(Axis(1)) {
            assert!(column.sum().abs() / 20.0 <= 1e-10);
            for c in cov.axis_iter(Axis(1)) {
                assert!(column.dot(&c).abs() <= 1e-8 * c.dot(&c).sqrt().max(1.0));
            }
        }
    }

    #[test]
    fn residuals_match_normal_equations_oracle() {
        use nalgebra::{DMatrix, DVector};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cov = random_covariates(20, &mut rng);
        let feat = Array::from_shape_fn((20, 5), |_| rng.random::<f64>() * 4.0);
        let out = residualize(&table_with(feat.clone(), cov.clone())).unwrap();

        // rescale ICV so the normal equations stay well conditioned
        let z = DMatrix::from_fn(20, 4, |i, j| match j {
            0 => 1.0,
            3 => cov[[i, 2]] / 1e6,
            _ => cov[[i, j - 1]],
        });
        let gram = (z.transpose() * &z).cholesky().unwrap();
        for j in 0..5 {
            let x = DVector::from_fn(20, |i, _| feat[[i, j]]);
            let beta = gram.solve(&(z.transpose() * &x));
            let resid = &x - &z * beta;
            for i in 0..20 {
                assert!((resid[i] - out.features()[[i, j]]).abs() <= 1e-8);
            }
            for c in 0..4 {
                assert!(z.column(c).dot(&resid).abs() <= 1e-8 * 20.0);
            }
        }
    }

    #[test]
    fn residualize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cov = random_covariates(15, &mut rng);
        let feat = Array::from_shape_fn((15, 4), |_| rng.random::<f64>());
        let once = residualize(&table_with(feat, cov)).unwrap();
        let twice = residualize(&once).unwrap();
        for (a, b) in once.features().iter().zip(twice.features().iter()) {
            assert!((a - b).abs() <= 1e-8);
        }
        assert_eq!(once.covariates(), twice.covariates());
        assert_eq!(once.labels(), twice.labels());
    }

    #[test]
    fn constant_sex_is_a_degenerate_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cov = random_covariates(10, &mut rng);
        cov.column_mut(1).fill(1.0);
        let feat = Array::from_shape_fn((10, 2), |_| rng.random::<f64>());
        let err = residualize(&table_with(feat, cov)).unwrap_err();
        assert_eq!(err, TabularError::DegenerateDesign { column: "sex" });
    }

    #[test]
    fn standardize_simple_column() {
        let (out, t) = standardize(array![[1.0], [2.0], [3.0]].view()).unwrap();
        assert!(out.column(0).sum().abs() <= 1e-10);
        let sd = (out.column(0).dot(&out.column(0)) / 2.0).sqrt();
        assert!((sd - 1.0).abs() <= 1e-8);
        assert_eq!(t.means[0], 2.0);
        assert_eq!(t.scales[0], 1.0);
    }

    #[test]
    fn standardize_is_idempotent() {
        let (once, _) = standardize(array![[1.0, 4.0], [2.0, -1.0], [7.0, 0.5], [3.0, 2.0]].view()).unwrap();
        let (twice, t) = standardize(once.view()).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
        assert!(t.means.iter().all(|m| m.abs() <= 1e-10));
        assert!(t.scales.iter().all(|s| (s - 1.0).abs() <= 1e-10));
    }

    #[test]
    fn standardize_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Array::from_shape_fn((9, 4), |_| rng.random::<f64>() * 100.0);
        let (out, t) = standardize(m.view()).unwrap();
        let back = t.unstandardize(out.view());
        for (a, b) in m.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_feature_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cov = random_covariates(6, &mut rng);
        let mut feat = Array::from_shape_fn((6, 3), |_| rng.random::<f64>());
        feat.column_mut(2).fill(4.0);
        let err = table_with(feat, cov).standardized().unwrap_err();
        assert_eq!(
            err,
            TabularError::ConstantFeature {
                site: "s1".into(),
                name: "f2".into()
            }
        );
    }

    #[test]
    fn metrics_examples() {
        let m = confusion_metrics(array![1.0, -1.0, -1.0, -1.0].view(), array![1.0, 1.0, -1.0, -1.0].view())
            .unwrap();
        assert_eq!(m, Metrics { accuracy: 0.75, specificity: 1.0, sensitivity: 0.5 });

        let actual = array![1.0, -1.0, 1.0, -1.0, -1.0];
        let m = confusion_metrics(actual.view(), actual.view()).unwrap();
        assert_eq!(m, Metrics { accuracy: 1.0, specificity: 1.0, sensitivity: 1.0 });

        let m = confusion_metrics(array![-1.0, -1.0, -1.0, -1.0].view(), array![1.0, -1.0, 1.0, -1.0].view())
            .unwrap();
        assert_eq!(m, Metrics { accuracy: 0.5, specificity: 1.0, sensitivity: 0.0 });
    }

    #[test]
    fn single_class_metrics_are_an_error() {
        let err = confusion_metrics(array![1.0, -1.0].view(), array![1.0, 1.0].view()).unwrap_err();
        assert_eq!(err, TabularError::SingleClass("specificity"));
    }

    #[test]
    fn folds_ten_subjects_six_positive() {
        let labels = array![1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0];
        let folds = stratified_folds(labels.view(), 5, 42).unwrap();
        for f in 0..5 {
            let (_, test) = folds.split(f);
            assert_eq!(test.len(), 2);
            let pos = test.iter().filter(|&&i| labels[i] == 1.0).count();
            assert!((1..=2).contains(&pos));
        }
        assert_eq!(folds, stratified_folds(labels.view(), 5, 42).unwrap());
    }

    #[test]
    fn folds_reject_small_classes_and_k_below_two() {
        let labels = array![1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        assert!(matches!(
            stratified_folds(labels.view(), 6, 0),
            Err(TabularError::InvalidFolds { k: 6, .. })
        ));
        let lone_control = array![1.0, 1.0, 1.0, 1.0, -1.0];
        assert!(stratified_folds(lone_control.view(), 2, 0).is_err());
        assert!(stratified_folds(labels.view(), 1, 0).is_err());
    }

    #[test]
    fn table_rejects_single_class_and_duplicate_names() {
        let cov = Array2::zeros((4, 3));
        let feat = Array2::zeros((4, 2));
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        assert!(SubjectTable::new("a", ids.clone(), vec!["x".into(), "y".into()], feat.clone(), cov.clone(), Array1::ones(4)).is_err());
        let labels = array![1.0, -1.0, 1.0, -1.0];
        assert!(SubjectTable::new("a", ids, vec!["x".into(), "x".into()], feat, cov, labels).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn metrics_are_permutation_invariant(
                pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 2..40),
                seed in any::<u64>(),
            ) {
                let mut pairs = pairs;
                pairs[0].1 = true;
                pairs[1].1 = false;
                let to_label = |b: bool| if b { 1.0 } else { -1.0 };
                let pred: Array1<f64> = pairs.iter().map(|p| to_label(p.0)).collect();
                let act: Array1<f64> = pairs.iter().map(|p| to_label(p.1)).collect();
                let before = confusion_metrics(pred.view(), act.view()).unwrap();
                let mut shuffled = pairs.clone();
                shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let pred: Array1<f64> = shuffled.iter().map(|p| to_label(p.0)).collect();
                let act: Array1<f64> = shuffled.iter().map(|p| to_label(p.1)).collect();
                prop_assert_eq!(before, confusion_metrics(pred.view(), act.view()).unwrap());
                prop_assert!(before.is_valid());
            }

            #[test]
            fn folds_partition_and_stratify(
                n_pos in 5usize..40, n_neg in 5usize..40, k in 2usize..6, seed in any::<u64>(),
            ) {
                let labels: Array1<f64> = (0..n_pos + n_neg)
                    .map(|i| if i < n_pos { 1.0 } else { -1.0 })
                    .collect();
                let folds = stratified_folds(labels.view(), k, seed).unwrap();
                let mut seen = vec![0usize; labels.len()];
                let mut pos_counts = Vec::new();
                for f in 0..k {
                    let (train, test) = folds.split(f);
                    prop_assert!(!test.is_empty());
                    prop_assert_eq!(train.len() + test.len(), labels.len());
                    for &i in &test { seen[i] += 1; }
                    pos_counts.push(test.iter().filter(|&&i| labels[i] == 1.0).count());
                }
                prop_assert!(seen.iter().all(|&c| c == 1));
                let spread = pos_counts.iter().max().unwrap() - pos_counts.iter().min().unwrap();
                prop_assert!(spread <= 1);
            }
        }
    }
}
