//! Multi-site weighted LASSO feature selection.
//!
//! Sites select features with a weighted LASSO, score them with an RBF SVM
//! under cross-validation, and share only feature indices and accuracy
//! figures with an integration server, which turns them into per-feature
//! penalty factors for the next round.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod cohort;
pub mod consensus;
mod real;
pub mod runner;
pub mod svm;
pub mod tabular;
pub mod transport;
pub mod wlasso;

pub use cohort::{generate_cohort, load_csv, write_cohort, write_csv, CohortConfig, SyntheticCohort};
pub use consensus::{
    aggregate_weights, penalty_from_weights, server_step, site_step, ProtocolError, ServerDecision, ServerState,
    SiteConfig, SiteRegistry, SiteReport, SiteState, TerminationReason, WeightVector,
};
pub use real::format_real;
pub use runner::{run_experiment, run_server, run_site, run_sweep, ExperimentConfig, ExperimentTranscript, RunError};
pub use svm::{grid_search_cv, smo_train, HyperGrid, SmoSettings, SvmModel};
pub use tabular::{Metrics, SubjectTable};
pub use transport::{decode_message, encode_message, Message, TransportError};
pub use wlasso::{fit, select_features, FeatureSet, LassoSolution, PenaltyVector, SelectionSettings, SolverSettings};
