//! The multi-site weighted LASSO protocol: weight aggregation, penalty
//! derivation, and the server and site state machines.
//!
//! The server broadcasts a penalty vector, every site answers with the
//! feature set and accuracy it currently stands by, and the server turns
//! those answers into the next penalty vector:
//!
//! ```text
//! W_f       = sum_s [f selected by s] * A_s * P_s / m
//! factor_f  = 1 - W_f
//! ```
//!
//! where `A_s` is the site's reported accuracy, `P_s` its share of all
//! subjects and `m` the number of sites. Round 0 uses the all-ones
//! penalty. The loop ends the first round in which no site reports a
//! strictly higher accuracy than before.

use std::collections::{BTreeMap, HashSet};

use log::{debug, info};
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::svm::{grid_search_cv, HyperGrid, SmoSettings, SvmError};
use crate::tabular::{residualize, stratified_folds, FoldAssignment, Metrics, SubjectTable, TabularError};
use crate::wlasso::{select_features, FeatureSet, LassoError, PenaltyVector, SelectionFlag, SelectionSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid site registry: {0}")]
    InvalidRegistry(String),
    #[error("no report from site `{0}`")]
    MissingSite(String),
    #[error("duplicate report from site `{0}`")]
    DuplicateSite(String),
    #[error("report from unregistered site `{0}`")]
    UnknownSite(String),
    #[error("report from site `{site}` is for round {got}, expected {expected}")]
    RoundMismatch { site: String, got: u32, expected: u32 },
    #[error("site `{site}` reported invalid data: {reason}")]
    InvalidReport { site: String, reason: String },
    #[error("the protocol has already terminated")]
    Terminated,
    #[error("penalty has {got} factors, expected {expected}")]
    PenaltyLength { got: usize, expected: usize },
    #[error("site `{site}`: {source}")]
    Data {
        site: String,
        #[source]
        source: TabularError,
    },
    #[error("site `{site}`: {source}")]
    Lasso {
        site: String,
        #[source]
        source: LassoError,
    },
    #[error("site `{site}`: {source}")]
    Svm {
        site: String,
        #[source]
        source: SvmError,
    },
}

/// Participating sites and their subject counts, ordered by site id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRegistry {
    entries: Vec<(String, usize)>,
    total_subjects: usize,
}

impl SiteRegistry {
    pub fn new(mut entries: Vec<(String, usize)>) -> Result<Self, ProtocolError> {
        if entries.is_empty() {
            return Err(ProtocolError::InvalidRegistry("no sites".into()));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(ProtocolError::InvalidRegistry(format!("site `{}` registered twice", w[0].0)));
        }
        if let Some((id, _)) = entries.iter().find(|(_, n)| *n == 0) {
            return Err(ProtocolError::InvalidRegistry(format!("site `{id}` has no subjects")));
        }
        let total_subjects = entries.iter().map(|(_, n)| n).sum();
        Ok(Self {
            entries,
            total_subjects,
        })
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn site_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn m(&self) -> usize {
        self.entries.len()
    }

    pub fn total_subjects(&self) -> usize {
        self.total_subjects
    }

    pub fn position(&self, site_id: &str) -> Option<usize> {
        self.entries.binary_search_by(|(id, _)| id.as_str().cmp(site_id)).ok()
    }
}

/// Each site's share of all subjects, in registry order.
pub fn site_proportions(registry: &SiteRegistry) -> Vec<f64> {
    let total = registry.total_subjects as f64;
    registry.entries.iter().map(|(_, n)| *n as f64 / total).collect()
}

/// What a site sends to the server each round: indices and scalars only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub site_id: String,
    pub round: u32,
    pub selected: FeatureSet,
    pub metrics: Metrics,
}

/// Consensus weight per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Checks that `reports` hold exactly one valid report per registered
/// site for `round`, and returns them in registry order.
fn reports_by_site<'a>(
    reports: &'a [SiteReport],
    registry: &SiteRegistry,
    round: u32,
    n_features: usize,
) -> Result<Vec<&'a SiteReport>, ProtocolError> {
    let mut slots: Vec<Option<&SiteReport>> = vec![None; registry.m()];
    for report in reports {
        let position = registry
            .position(&report.site_id)
            .ok_or_else(|| ProtocolError::UnknownSite(report.site_id.clone()))?;
        if slots[position].is_some() {
            return Err(ProtocolError::DuplicateSite(report.site_id.clone()));
        }
        if report.round != round {
            return Err(ProtocolError::RoundMismatch {
                site: report.site_id.clone(),
                got: report.round,
                expected: round,
            });
        }
        let invalid = |reason: String| ProtocolError::InvalidReport {
            site: report.site_id.clone(),
            reason,
        };
        if !report.metrics.is_valid() {
            return Err(invalid(format!("metrics {:?} outside [0, 1]", report.metrics)));
        }
        if let Some(&i) = report.selected.indices().iter().find(|&&i| i >= n_features) {
            return Err(invalid(format!("feature index {i} >= {n_features}")));
        }
        slots[position] = Some(report);
    }
    slots
        .into_iter()
        .zip(registry.site_ids())
        .map(|(slot, id)| slot.ok_or_else(|| ProtocolError::MissingSite(id.to_string())))
        .collect()
}

/// Consensus weights from one round of reports.
pub fn aggregate_weights(
    reports: &[SiteReport],
    registry: &SiteRegistry,
    n_features: usize,
) -> Result<WeightVector, ProtocolError> {
    let round = reports.first().map_or(0, |r| r.round);
    let ordered = reports_by_site(reports, registry, round, n_features)?;
    let proportions = site_proportions(registry);
    let m = registry.m() as f64;
    let mut weights = vec![0.0; n_features];
    for (report, p) in ordered.iter().zip(&proportions) {
        let contribution = report.metrics.accuracy * p / m;
        for &f in report.selected.indices() {
            weights[f] += contribution;
        }
    }
    Ok(WeightVector(weights))
}

/// `factor_f = 1 - W_f`.
pub fn penalty_from_weights(weights: &WeightVector) -> PenaltyVector {
    PenaltyVector::new(weights.0.iter().map(|w| 1.0 - w).collect())
        .expect("weights lie in [0, 1/m] so factors lie in [0, 1]")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    /// No site improved its accuracy this round.
    NoImprovement,
    /// The round cap was reached while sites were still improving.
    RoundCap,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerDecision {
    /// Broadcast `penalty` for `round`.
    Continue {
        round: u32,
        weights: WeightVector,
        penalty: PenaltyVector,
    },
    /// Broadcast the null (terminate) message.
    Terminate {
        round: u32,
        weights: WeightVector,
        reason: TerminationReason,
    },
}

/// Integration-server state. Mutated only by [`server_step`].
#[derive(Debug, Clone)]
pub struct ServerState {
    registry: SiteRegistry,
    n_features: usize,
    max_rounds: u32,
    round: u32,
    last_reports: BTreeMap<String, SiteReport>,
    previous_accuracy: BTreeMap<String, f64>,
    terminated: bool,
}

impl ServerState {
    pub fn new(registry: SiteRegistry, n_features: usize, max_rounds: u32) -> Self {
        let previous_accuracy = registry.site_ids().map(|id| (id.to_string(), 0.0)).collect();
        Self {
            registry,
            n_features,
            max_rounds: max_rounds.max(1),
            round: 0,
            last_reports: BTreeMap::new(),
            previous_accuracy,
            terminated: false,
        }
    }

    /// Round-0 broadcast: the ordinary LASSO penalty.
    pub fn initial_penalty(&self) -> PenaltyVector {
        PenaltyVector::ones(self.n_features)
    }

    pub fn registry(&self) -> &SiteRegistry {
        &self.registry
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// The round whose reports the server is waiting for.
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn last_reports(&self) -> &BTreeMap<String, SiteReport> {
        &self.last_reports
    }

    pub fn previous_accuracy(&self) -> &BTreeMap<String, f64> {
        &self.previous_accuracy
    }
}

/// Consumes one round of reports and decides whether to continue.
pub fn server_step(state: &mut ServerState, reports: &[SiteReport]) -> Result<ServerDecision, ProtocolError> {
    if state.terminated {
        return Err(ProtocolError::Terminated);
    }
    let round = state.round;
    let ordered = reports_by_site(reports, &state.registry, round, state.n_features)?;
    let improved: Vec<&str> = ordered
        .iter()
        .filter(|r| r.metrics.accuracy > state.previous_accuracy[&r.site_id])
        .map(|r| r.site_id.as_str())
        .collect();
    let weights = aggregate_weights(reports, &state.registry, state.n_features)?;

    for report in &ordered {
        state.previous_accuracy.insert(report.site_id.clone(), report.metrics.accuracy);
        state.last_reports.insert(report.site_id.clone(), (*report).clone());
    }

    if improved.is_empty() {
        info!("round {round}: no site improved; terminating");
        state.terminated = true;
        return Ok(ServerDecision::Terminate {
            round,
            weights,
            reason: TerminationReason::NoImprovement,
        });
    }
    if round + 1 >= state.max_rounds {
        info!("round {round}: round cap {} reached; terminating", state.max_rounds);
        state.terminated = true;
        return Ok(ServerDecision::Terminate {
            round,
            weights,
            reason: TerminationReason::RoundCap,
        });
    }
    debug!("round {round}: improved at {improved:?}");
    state.round += 1;
    let penalty = penalty_from_weights(&weights);
    Ok(ServerDecision::Continue {
        round: state.round,
        weights,
        penalty,
    })
}

/// Per-site selection and classification settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteConfig {
    pub selection: SelectionSettings,
    pub grid: HyperGrid,
    pub smo: SmoSettings,
    pub folds: usize,
    pub fold_seed: u64,
}

impl Default for SiteConfig {
    fn default() -> Self {
        Self {
            selection: SelectionSettings::default(),
            grid: HyperGrid::default(),
            smo: SmoSettings::default(),
            folds: 5,
            fold_seed: 0,
        }
    }
}

/// What a site did with the latest penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    /// New features with strictly better accuracy were adopted.
    Adopted,
    /// The selection was unchanged; no classifier was trained.
    Unchanged,
    /// New features did not beat the current accuracy and were discarded.
    Rejected,
    /// The selection was empty; nothing could be classified.
    EmptySelection,
}

/// One site's private state across rounds.
#[derive(Debug, Clone)]
pub struct SiteState {
    site_id: String,
    design: Array2<f64>,
    response: Array1<f64>,
    labels: Array1<f64>,
    folds: FoldAssignment,
    config: SiteConfig,
    current_features: FeatureSet,
    current_metrics: Metrics,
    last_outcome: Option<StepOutcome>,
    last_flag: Option<SelectionFlag>,
}

impl SiteState {
    /// Residualizes and standardizes the table once, and freezes the folds.
    pub fn prepare(table: &SubjectTable, config: SiteConfig) -> Result<Self, ProtocolError> {
        let site = table.site_id().to_string();
        let data_error = |source: TabularError| ProtocolError::Data {
            site: site.clone(),
            source,
        };
        let residual = residualize(table).map_err(data_error)?;
        let (standardized, _) = residual.standardized().map_err(data_error)?;
        let labels = standardized.labels().to_owned();
        let folds = stratified_folds(labels.view(), config.folds, config.fold_seed).map_err(data_error)?;
        let mean = labels.mean().expect("table has subjects");
        let response = labels.mapv(|l| l - mean);
        Ok(Self {
            site_id: site,
            design: standardized.features().to_owned(),
            response,
            labels,
            folds,
            config,
            current_features: FeatureSet::empty(),
            current_metrics: Metrics::ZERO,
            last_outcome: None,
            last_flag: None,
        })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn n_subjects(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.design.ncols()
    }

    pub fn current_features(&self) -> &FeatureSet {
        &self.current_features
    }

    pub fn current_metrics(&self) -> Metrics {
        self.current_metrics
    }

    pub fn folds(&self) -> &FoldAssignment {
        &self.folds
    }

    pub fn last_outcome(&self) -> Option<StepOutcome> {
        self.last_outcome
    }

    pub fn last_flag(&self) -> Option<SelectionFlag> {
        self.last_flag
    }

    /// Cross-validated metrics of the classifier restricted to `features`.
    pub fn evaluate(&self, features: &FeatureSet) -> Result<Metrics, ProtocolError> {
        let columns = self.design.select(Axis(1), features.indices());
        grid_search_cv(columns.view(), self.labels.view(), &self.config.grid, &self.folds, &self.config.smo)
            .map(|r| r.metrics)
            .map_err(|source| ProtocolError::Svm {
                site: self.site_id.clone(),
                source,
            })
    }

    fn report(&self, round: u32) -> SiteReport {
        SiteReport {
            site_id: self.site_id.clone(),
            round,
            selected: self.current_features.clone(),
            metrics: self.current_metrics,
        }
    }
}

/// One site round: select under `penalty`, evaluate if the selection
/// changed, adopt only on strictly higher accuracy, and always report the
/// feature set and metrics the site currently stands by.
pub fn site_step(state: &mut SiteState, round: u32, penalty: &PenaltyVector) -> Result<SiteReport, ProtocolError> {
    if penalty.len() != state.n_features() {
        return Err(ProtocolError::PenaltyLength {
            got: penalty.len(),
            expected: state.n_features(),
        });
    }
    let selection = select_features(state.design.view(), state.response.view(), penalty, &state.config.selection)
        .map_err(|source| ProtocolError::Lasso {
        site: state.site_id.clone(),
        source,
    })?;
    state.last_flag = selection.flag;
    let proposal = selection.features;

    let outcome = if proposal.is_empty() {
        StepOutcome::EmptySelection
    } else if proposal == state.current_features {
        StepOutcome::Unchanged
    } else {
        let metrics = state.evaluate(&proposal)?;
        if metrics.accuracy > state.current_metrics.accuracy {
            state.current_features = proposal;
            state.current_metrics = metrics;
            StepOutcome::Adopted
        } else {
            StepOutcome::Rejected
        }
    };
    debug!(
        "site {} round {round}: {outcome:?}, {} features, accuracy {:.4}",
        state.site_id,
        state.current_features.size(),
        state.current_metrics.accuracy
    );
    state.last_outcome = Some(outcome);
    Ok(state.report(round))
}

/// Union of the features the given reports stand by.
pub fn feature_union<'a>(reports: impl IntoIterator<Item = &'a SiteReport>) -> Vec<usize> {
    let mut seen = HashSet::new();
    let mut union: Vec<usize> = reports
        .into_iter()
        .flat_map(|r| r.selected.indices().iter().copied())
        .filter(|f| seen.insert(*f))
        .collect();
    union.sort_unstable();
    union
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry(sizes: &[(&str, usize)]) -> SiteRegistry {
        SiteRegistry::new(sizes.iter().map(|(id, n)| (id.to_string(), *n)).collect()).unwrap()
    }

    fn report(site: &str, round: u32, selected: Vec<usize>, accuracy: f64) -> SiteReport {
        SiteReport {
            site_id: site.into(),
            round,
            selected: FeatureSet::new(selected, 1000).unwrap(),
            metrics: Metrics {
                accuracy,
                specificity: accuracy,
                sensitivity: accuracy,
            },
        }
    }

    #[test]
    fn proportions_for_five_site_cohort() {
        let reg = registry(&[("s1", 45), ("s2", 110), ("s3", 130), ("s4", 172), ("s5", 100)]);
        assert_eq!(reg.total_subjects(), 557);
        let p = site_proportions(&reg);
        assert_eq!(p[0], 45.0 / 557.0);
        assert!((p[0] - 0.0808).abs() < 1e-4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(site_proportions(&registry(&[("only", 7)])), vec![1.0]);
        assert_eq!(site_proportions(&registry(&[("a", 3), ("b", 3)])), vec![0.5, 0.5]);
    }

    #[test]
    fn registry_rejects_duplicates_and_empty_sites() {
        assert!(SiteRegistry::new(vec![("a".into(), 3), ("a".into(), 4)]).is_err());
        assert!(SiteRegistry::new(vec![("a".into(), 0)]).is_err());
        assert!(SiteRegistry::new(vec![]).is_err());
    }

    #[test]
    fn aggregation_hand_cases() {
        let reg = registry(&[("s1", 50), ("s2", 50)]);
        let reports = [report("s1", 0, vec![0, 1], 0.8), report("s2", 0, vec![0], 0.6)];
        let w = aggregate_weights(&reports, &reg, 3).unwrap();
        assert!((w.weights()[0] - 0.35).abs() < 1e-15);
        assert!((w.weights()[1] - 0.20).abs() < 1e-15);
        assert_eq!(w.weights()[2], 0.0);

        let p = penalty_from_weights(&w);
        assert!((p.factors()[0] - 0.65).abs() < 1e-15);
        assert_eq!(p.factors()[2], 1.0);
        assert_eq!(penalty_from_weights(&WeightVector(vec![0.0; 4])), PenaltyVector::ones(4));
    }

    #[test]
    fn aggregation_protocol_errors() {
        let reg = registry(&[("s1", 50), ("s2", 50)]);
        let missing = [report("s1", 0, vec![0], 0.8)];
        assert_eq!(
            aggregate_weights(&missing, &reg, 3),
            Err(ProtocolError::MissingSite("s2".into()))
        );
        let dup = [report("s1", 0, vec![0], 0.8), report("s1", 0, vec![1], 0.8)];
        assert_eq!(aggregate_weights(&dup, &reg, 3), Err(ProtocolError::DuplicateSite("s1".into())));
        let mixed = [report("s1", 0, vec![0], 0.8), report("s2", 1, vec![1], 0.8)];
        assert!(matches!(
            aggregate_weights(&mixed, &reg, 3),
            Err(ProtocolError::RoundMismatch { .. })
        ));
        let stranger = [report("s1", 0, vec![0], 0.8), report("zz", 0, vec![1], 0.8)];
        assert_eq!(aggregate_weights(&stranger, &reg, 3), Err(ProtocolError::UnknownSite("zz".into())));
    }

    #[test]
    fn server_continues_then_terminates_on_flat_round() {
        let reg = registry(&[("a", 10), ("b", 20)]);
        let mut server = ServerState::new(reg, 4, 50);
        assert_eq!(server.initial_penalty(), PenaltyVector::ones(4));

        let round0 = [report("a", 0, vec![0, 1], 0.7), report("b", 0, vec![1], 0.6)];
        let decision = server_step(&mut server, &round0).unwrap();
        let ServerDecision::Continue { round, penalty, .. } = decision else {
            panic!("round 0 with positive accuracy must continue");
        };
        assert_eq!(round, 1);
        assert!(penalty.factors()[1] < penalty.factors()[0]);
        assert_eq!(penalty.factors()[3], 1.0);

        let round1 = [report("a", 1, vec![0, 2], 0.72), report("b", 1, vec![1], 0.6)];
        assert!(matches!(server_step(&mut server, &round1).unwrap(), ServerDecision::Continue { round: 2, .. }));

        let round2 = [report("a", 2, vec![0, 2], 0.72), report("b", 2, vec![1], 0.6)];
        assert!(matches!(
            server_step(&mut server, &round2).unwrap(),
            ServerDecision::Terminate { round: 2, reason: TerminationReason::NoImprovement, .. }
        ));
        assert!(server.is_terminated());
        assert_eq!(server_step(&mut server, &round2), Err(ProtocolError::Terminated));
    }

    #[test]
    fn server_respects_round_cap() {
        let reg = registry(&[("a", 10)]);
        let mut server = ServerState::new(reg, 2, 2);
        assert!(matches!(server_step(&mut server, &[report("a", 0, vec![0], 0.5)]).unwrap(), ServerDecision::Continue { .. }));
        assert!(matches!(
            server_step(&mut server, &[report("a", 1, vec![1], 0.6)]).unwrap(),
            ServerDecision::Terminate { reason: TerminationReason::RoundCap, .. }
        ));
    }

    #[test]
    fn server_rejects_wrong_round() {
        let reg = registry(&[("a", 10)]);
        let mut server = ServerState::new(reg, 2, 50);
        assert!(matches!(
            server_step(&mut server, &[report("a", 3, vec![0], 0.5)]),
            Err(ProtocolError::RoundMismatch { got: 3, expected: 0, .. })
        ));
    }

    #[test]
    fn union_is_sorted_and_deduplicated() {
        let reports = [report("a", 0, vec![1, 5, 9], 0.5), report("b", 0, vec![0, 5], 0.5)];
        assert_eq!(feature_union(&reports), vec![0, 1, 5, 9]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn cohort() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<Vec<bool>>)> {
            (1usize..7, 1usize..12).prop_flat_map(|(m, p)| {
                (
                    prop::collection::vec(1usize..300, m),
                    prop::collection::vec(0.0f64..=1.0, m),
                    prop::collection::vec(prop::collection::vec(any::<bool>(), p), m),
                )
            })
        }

        fn build(sizes: &[usize], accs: &[f64], picks: &[Vec<bool>]) -> (SiteRegistry, Vec<SiteReport>) {
            let reg = SiteRegistry::new(
                sizes.iter().enumerate().map(|(i, &n)| (format!("site{i}"), n)).collect(),
            )
            .unwrap();
            let reports = picks
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let selected = row.iter().enumerate().filter(|(_, &b)| b).map(|(f, _)| f).collect();
                    report(&format!("site{i}"), 0, selected, accs[i])
                })
                .collect();
            (reg, reports)
        }

        proptest! {
            #[test]
            fn weights_are_bounded_and_monotone_in_selection((sizes, accs, picks) in cohort(), site in any::<prop::sample::Index>(), feature in any::<prop::sample::Index>()) {
                let p = picks[0].len();
                let m = sizes.len() as f64;
                let (reg, reports) = build(&sizes, &accs, &picks);
                let w = aggregate_weights(&reports, &reg, p).unwrap();
                let bound: f64 = accs.iter().zip(site_proportions(&reg)).map(|(a, p)| a * p).sum::<f64>() / m;
                for &wf in w.weights() {
                    prop_assert!(wf >= 0.0);
                    prop_assert!(wf <= bound + 1e-15);
                    prop_assert!(wf <= 1.0 / m + 1e-15);
                }
                let penalty = penalty_from_weights(&w);
                prop_assert!(penalty.factors().iter().all(|&f| f >= 1.0 - 1.0 / m - 1e-15 && f <= 1.0));

                // one more site selecting the feature never lowers its weight
                let s = site.index(sizes.len());
                let f = feature.index(p);
                let mut more = picks.clone();
                more[s][f] = true;
                let (reg, reports) = build(&sizes, &accs, &more);
                let w2 = aggregate_weights(&reports, &reg, p).unwrap();
                prop_assert!(w2.weights()[f] >= w.weights()[f]);
                if !picks[s][f] && accs[s] > 0.0 {
                    prop_assert!(w2.weights()[f] > w.weights()[f]);
                }
            }
        }
    }
}
