//! Experiment orchestration: configuration, the server and site loops,
//! simulate/socket/sweep drivers, and the transcript and CSV reports.

use std::fs;
use std::io;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{generate_cohort, load_csv, CohortConfig, CohortError};
use crate::consensus::{
    feature_union, server_step, ProtocolError, ServerDecision, ServerState, SiteConfig, SiteRegistry, SiteReport,
    SiteState, TerminationReason, WeightVector,
};
use crate::real::{format_real, JsonObject};
use crate::svm::{HyperGrid, SmoSettings};
use crate::tabular::SubjectTable;
use crate::transport::{self, Message, ServerHub, SiteLink, TcpLink, TransportError, DEFAULT_PORT};
use crate::wlasso::{FeatureSet, SelectionSettings, SolverSettings};

/// Sparsity levels swept by default.
pub const DEFAULT_SWEEP: [f64; 10] = [0.13, 0.20, 0.23, 0.26, 0.30, 0.33, 0.36, 0.40, 0.43, 0.46];

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("site `{site}` failed: {source}")]
    Site {
        site: String,
        #[source]
        source: Box<RunError>,
    },
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Simulate,
    Server,
    Site,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Synthetic cohort used when `data` is empty.
    pub cohort: CohortConfig,
    /// Site CSV files. Each file stem is a site id.
    pub data: Vec<PathBuf>,
    pub sparsity_fraction: f64,
    pub sweep: Vec<f64>,
    /// Overrides the default SVM hyperparameter grid.
    pub grid: Option<HyperGrid>,
    pub folds: usize,
    /// Master seed for every site's fold assignment.
    pub fold_seed: u64,
    pub max_rounds: u32,
    pub path_len: usize,
    pub endpoint: String,
    /// Number of sites the server waits for. Defaults to the cohort size.
    pub expected_sites: Option<usize>,
    pub barrier_timeout_secs: u64,
    /// How long a site keeps retrying to reach the server.
    pub connect_timeout_secs: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Simulate,
            cohort: CohortConfig::default(),
            data: Vec::new(),
            sparsity_fraction: 0.16,
            sweep: DEFAULT_SWEEP.to_vec(),
            grid: None,
            folds: 5,
            fold_seed: 0,
            max_rounds: 50,
            path_len: 100,
            endpoint: format!("127.0.0.1:{DEFAULT_PORT}"),
            expected_sites: None,
            barrier_timeout_secs: 3600,
            connect_timeout_secs: 30,
            out_dir: PathBuf::from("mswl-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let in_unit = |f: f64| f > 0.0 && f < 1.0;
        if !in_unit(self.sparsity_fraction) {
            return Err(RunError::Config(format!(
                "sparsity_fraction {} outside (0, 1)",
                self.sparsity_fraction
            )));
        }
        if let Some(f) = self.sweep.iter().find(|&&f| !in_unit(f)) {
            return Err(RunError::Config(format!("sweep level {f} outside (0, 1)")));
        }
        if self.folds < 2 {
            return Err(RunError::Config("folds must be at least 2".into()));
        }
        if self.max_rounds == 0 {
            return Err(RunError::Config("max_rounds must be at least 1".into()));
        }
        if self.path_len < 2 {
            return Err(RunError::Config("path_len must be at least 2".into()));
        }
        if self.expected_sites == Some(0) {
            return Err(RunError::Config("expected_sites must be at least 1".into()));
        }
        Ok(())
    }

    /// Settings for the site called `site_id`.
    pub fn site_config(&self, site_id: &str) -> SiteConfig {
        SiteConfig {
            selection: SelectionSettings {
                target_fraction: self.sparsity_fraction,
                path_len: self.path_len,
                solver: SolverSettings::default(),
            },
            grid: self.grid.clone().unwrap_or_default(),
            smo: SmoSettings::default(),
            folds: self.folds,
            fold_seed: site_fold_seed(self.fold_seed, site_id),
        }
    }

    fn barrier_timeout(&self) -> Duration {
        Duration::from_secs(self.barrier_timeout_secs)
    }

    fn expected_sites(&self) -> usize {
        self.expected_sites.unwrap_or(if self.data.is_empty() {
            self.cohort.site_sizes.len()
        } else {
            self.data.len()
        })
    }
}

/// Fold seed of one site: the master seed mixed with a hash of the site id,
/// so a site's folds do not depend on which other sites take part.
pub fn site_fold_seed(master: u64, site_id: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in site_id.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ hash;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Site tables for simulate mode, plus the planted support if synthetic.
pub fn load_tables(config: &ExperimentConfig) -> Result<(Vec<SubjectTable>, Option<FeatureSet>), RunError> {
    if config.data.is_empty() {
        let cohort = generate_cohort(&config.cohort)?;
        Ok((cohort.tables, Some(cohort.planted_support)))
    } else {
        let tables = config.data.iter().map(|p| load_csv(p)).collect::<Result<Vec<_>, _>>()?;
        Ok((tables, None))
    }
}

/// One completed round as seen by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    /// Ordered by site id.
    pub reports: Vec<SiteReport>,
    pub weights: WeightVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTranscript {
    pub registry: SiteRegistry,
    pub n_features: usize,
    pub rounds: Vec<RoundRecord>,
    pub final_round: u32,
    pub reason: TerminationReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteImprovement {
    pub site_id: String,
    pub accuracy: f64,
    pub specificity: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub n_rounds: usize,
    pub reason: TerminationReason,
    /// Final-round minus round-0 metrics per site.
    pub improvement: Vec<SiteImprovement>,
    pub mean_accuracy_improvement: f64,
    /// Size of the union of reported feature sets, per round.
    pub union_sizes: Vec<usize>,
    /// Share of the planted support covered by the union, per round.
    pub planted_recall: Option<Vec<f64>>,
}

fn reason_name(reason: TerminationReason) -> &'static str {
    match reason {
        TerminationReason::NoImprovement => "no_improvement",
        TerminationReason::RoundCap => "round_cap",
    }
}

impl ExperimentTranscript {
    /// JSON lines: a registry record, one record per round, then the
    /// terminate record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let sites = self.registry.entries().iter().map(|(id, n)| {
            JsonObject::new()
                .string("site_id", id)
                .uint("n_subjects", *n as u64)
                .finish()
        });
        out.push_str(
            &JsonObject::new()
                .string("type", "registry")
                .uint("n_features", self.n_features as u64)
                .objects("sites", sites)
                .finish(),
        );
        out.push('\n');
        for record in &self.rounds {
            let reports = record.reports.iter().map(|r| {
                JsonObject::new()
                    .string("site_id", &r.site_id)
                    .uints("selected", r.selected.indices().iter().map(|&i| i as u64))
                    .real("accuracy", r.metrics.accuracy)
                    .real("specificity", r.metrics.specificity)
                    .real("sensitivity", r.metrics.sensitivity)
                    .finish()
            });
            out.push_str(
                &JsonObject::new()
                    .string("type", "round")
                    .uint("round", u64::from(record.round))
                    .objects("reports", reports)
                    .reals("weights", record.weights.weights())
                    .finish(),
            );
            out.push('\n');
        }
        out.push_str(
            &JsonObject::new()
                .string("type", "terminate")
                .uint("round", u64::from(self.final_round))
                .string("reason", reason_name(self.reason))
                .finish(),
        );
        out.push('\n');
        out
    }

    pub fn summary(&self, planted: Option<&FeatureSet>) -> ExperimentSummary {
        let first = &self.rounds.first().expect("a transcript has at least one round").reports;
        let last = &self.rounds.last().expect("a transcript has at least one round").reports;
        let improvement: Vec<SiteImprovement> = first
            .iter()
            .zip(last)
            .map(|(a, b)| SiteImprovement {
                site_id: a.site_id.clone(),
                accuracy: b.metrics.accuracy - a.metrics.accuracy,
                specificity: b.metrics.specificity - a.metrics.specificity,
                sensitivity: b.metrics.sensitivity - a.metrics.sensitivity,
            })
            .collect();
        let mean_accuracy_improvement =
            improvement.iter().map(|i| i.accuracy).sum::<f64>() / improvement.len() as f64;
        let unions: Vec<Vec<usize>> = self.rounds.iter().map(|r| feature_union(&r.reports)).collect();
        let planted_recall = planted.map(|support| {
            unions
                .iter()
                .map(|u| {
                    if support.is_empty() {
                        1.0
                    } else {
                        u.iter().filter(|&&f| support.contains(f)).count() as f64 / support.size() as f64
                    }
                })
                .collect()
        });
        ExperimentSummary {
            n_rounds: self.rounds.len(),
            reason: self.reason,
            improvement,
            mean_accuracy_improvement,
            union_sizes: unions.iter().map(Vec::len).collect(),
            planted_recall,
        }
    }

    /// `round,site,acc,spe,sen`, one row per site and round.
    pub fn metrics_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(["round", "site", "acc", "spe", "sen"])
            .expect("writing to memory");
        for record in &self.rounds {
            for r in &record.reports {
                writer
                    .write_record([
                        record.round.to_string(),
                        r.site_id.clone(),
                        format_real(r.metrics.accuracy),
                        format_real(r.metrics.specificity),
                        format_real(r.metrics.sensitivity),
                    ])
                    .expect("writing to memory");
            }
        }
        String::from_utf8(writer.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
    }

    /// `feature,round_0,...`: how many sites report each feature per round.
    pub fn persistence_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["feature".to_string()];
        header.extend(self.rounds.iter().map(|r| format!("round_{}", r.round)));
        writer.write_record(&header).expect("writing to memory");
        let mut counts = vec![vec![0usize; self.rounds.len()]; self.n_features];
        for (k, record) in self.rounds.iter().enumerate() {
            for report in &record.reports {
                for &f in report.selected.indices() {
                    counts[f][k] += 1;
                }
            }
        }
        for (f, row) in counts.iter().enumerate() {
            let mut fields = vec![f.to_string()];
            fields.extend(row.iter().map(usize::to_string));
            writer.write_record(&fields).expect("writing to memory");
        }
        String::from_utf8(writer.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
    }

    /// Writes `transcript.jsonl`, `summary.json`, `metrics_per_round.csv`
    /// and `feature_persistence.csv` into `dir`.
    pub fn write(&self, dir: &Path, planted: Option<&FeatureSet>) -> Result<(), RunError> {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        let summary = serde_json::to_string_pretty(&self.summary(planted)).expect("summary serializes") + "\n";
        for (name, contents) in [
            ("transcript.jsonl", self.to_jsonl()),
            ("summary.json", summary),
            ("metrics_per_round.csv", self.metrics_csv()),
            ("feature_persistence.csv", self.persistence_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(io_error(&path))?;
        }
        Ok(())
    }
}

/// Runs the integration server over an already connected hub.
pub fn serve(hub: &mut ServerHub, max_rounds: u32, timeout: Duration) -> Result<ExperimentTranscript, RunError> {
    let (registry, n_features) = hub.handshake(timeout)?;
    info!("{} sites registered, {n_features} features", registry.m());
    let mut state = ServerState::new(registry.clone(), n_features, max_rounds);
    hub.broadcast(&Message::Weights {
        round: 0,
        penalty: state.initial_penalty(),
    })?;
    let mut rounds = Vec::new();
    loop {
        let round = state.round();
        let reports = hub.round_barrier(round, timeout)?;
        let decision = server_step(&mut state, &reports)?;
        for r in &reports {
            info!(
                "round {round} {}: {} features, acc {:.4} spe {:.4} sen {:.4}",
                r.site_id,
                r.selected.size(),
                r.metrics.accuracy,
                r.metrics.specificity,
                r.metrics.sensitivity
            );
        }
        match decision {
            ServerDecision::Continue {
                round: next,
                weights,
                penalty,
            } => {
                rounds.push(RoundRecord {
                    round,
                    reports,
                    weights,
                });
                hub.broadcast(&Message::Weights { round: next, penalty })?;
            }
            ServerDecision::Terminate { round, weights, reason } => {
                rounds.push(RoundRecord {
                    round,
                    reports,
                    weights,
                });
                hub.broadcast(&Message::Terminate { round })?;
                info!("terminated after round {round}: {}", reason_name(reason));
                return Ok(ExperimentTranscript {
                    registry,
                    n_features,
                    rounds,
                    final_round: round,
                    reason,
                });
            }
        }
    }
}

/// Runs one site until the server terminates. Returns the final round.
pub fn participate(link: &mut impl SiteLink, state: &mut SiteState) -> Result<u32, RunError> {
    link.send(&Message::Hello {
        site_id: state.site_id().to_string(),
        n_subjects: state.n_subjects(),
        n_features: state.n_features(),
    })?;
    loop {
        match link.recv(state.n_features())? {
            Message::Weights { round, penalty } => {
                let report = crate::consensus::site_step(state, round, &penalty)?;
                link.send(&Message::Report(report))?;
            }
            Message::Terminate { round } => return Ok(round),
            other => {
                return Err(TransportError::Unexpected {
                    got: other.kind(),
                    from: "server".into(),
                }
                .into())
            }
        }
    }
}

fn prepare_sites(config: &ExperimentConfig, tables: &[SubjectTable]) -> Result<Vec<SiteState>, RunError> {
    tables
        .iter()
        .map(|t| SiteState::prepare(t, config.site_config(t.site_id())).map_err(RunError::from))
        .collect()
}

/// Picks the most informative error once server and sites have stopped.
fn settle(
    server: Result<ExperimentTranscript, RunError>,
    sites: Vec<(String, thread::Result<Result<u32, RunError>>)>,
) -> Result<ExperimentTranscript, RunError> {
    let mut site_error = None;
    for (site, outcome) in sites {
        match outcome {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => {
                site_error.get_or_insert(RunError::Site {
                    site,
                    source: Box::new(e),
                });
            }
            Err(_) => panic!("site `{site}` panicked"),
        }
    }
    match (server, site_error) {
        (Ok(t), None) => Ok(t),
        (Ok(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e),
        (Err(server), Some(site)) => {
            warn!("server stopped: {server}");
            Err(site)
        }
    }
}

/// Runs every site in its own thread against an in-process server.
pub fn simulate_tables(config: &ExperimentConfig, tables: &[SubjectTable]) -> Result<ExperimentTranscript, RunError> {
    config.validate()?;
    let mut sites = prepare_sites(config, tables)?;
    let (mut hub, links) = transport::in_process(sites.len());
    thread::scope(|scope| {
        let handles: Vec<_> = sites
            .iter_mut()
            .zip(links)
            .map(|(state, mut link)| {
                let id = state.site_id().to_string();
                (id, scope.spawn(move || participate(&mut link, state)))
            })
            .collect();
        let server = serve(&mut hub, config.max_rounds, config.barrier_timeout());
        drop(hub);
        settle(server, handles.into_iter().map(|(id, h)| (id, h.join())).collect())
    })
}

/// Same as [`simulate_tables`] but every site talks to the server over a
/// loopback TCP connection.
pub fn simulate_tables_over_tcp(
    config: &ExperimentConfig,
    tables: &[SubjectTable],
) -> Result<ExperimentTranscript, RunError> {
    config.validate()?;
    let mut sites = prepare_sites(config, tables)?;
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| RunError::Transport(e.into()))?;
    let addr = listener.local_addr().map_err(|e| RunError::Transport(e.into()))?;
    thread::scope(|scope| {
        let handles: Vec<_> = sites
            .iter_mut()
            .map(|state| {
                let id = state.site_id().to_string();
                let handle = scope.spawn(move || {
                    let mut link = TcpLink::connect(addr)?;
                    participate(&mut link, state)
                });
                (id, handle)
            })
            .collect();
        let server = transport::accept_tcp(&listener, handles.len())
            .map_err(RunError::from)
            .and_then(|mut hub| serve(&mut hub, config.max_rounds, config.barrier_timeout()));
        settle(server, handles.into_iter().map(|(id, h)| (id, h.join())).collect())
    })
}

/// Simulate mode: generate or load the data, run, and write the reports to
/// `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentTranscript, RunError> {
    let (tables, planted) = load_tables(config)?;
    let transcript = simulate_tables(config, &tables)?;
    transcript.write(&config.out_dir, planted.as_ref())?;
    Ok(transcript)
}

/// Directory name of a sweep level, its percentage.
pub fn sweep_dir_name(fraction: f64) -> String {
    format!("{:.0}", fraction * 100.0)
}

/// Runs simulate mode once per sweep level under `out_dir/sweep/<pct>/`
/// and writes `out_dir/sweep/summary.csv`.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<(f64, ExperimentTranscript)>, RunError> {
    config.validate()?;
    if config.sweep.is_empty() {
        return Err(RunError::Config("sweep has no levels".into()));
    }
    let (tables, planted) = load_tables(config)?;
    let root = config.out_dir.join("sweep");
    let mut results = Vec::new();
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["fraction", "rounds", "acc_improvement", "spe_improvement", "sen_improvement", "final_union"])
        .expect("writing to memory");
    for &fraction in &config.sweep {
        let level = ExperimentConfig {
            sparsity_fraction: fraction,
            ..config.clone()
        };
        info!("sweep level {fraction}");
        let transcript = simulate_tables(&level, &tables)?;
        transcript.write(&root.join(sweep_dir_name(fraction)), planted.as_ref())?;
        let summary = transcript.summary(None);
        let mean = |f: fn(&SiteImprovement) -> f64| {
            summary.improvement.iter().map(f).sum::<f64>() / summary.improvement.len() as f64
        };
        writer
            .write_record([
                format_real(fraction),
                summary.n_rounds.to_string(),
                format_real(mean(|i| i.accuracy)),
                format_real(mean(|i| i.specificity)),
                format_real(mean(|i| i.sensitivity)),
                summary.union_sizes.last().copied().unwrap_or(0).to_string(),
            ])
            .expect("writing to memory");
        results.push((fraction, transcript));
    }
    let path = root.join("summary.csv");
    fs::write(&path, writer.into_inner().expect("writing to memory")).map_err(io_error(&path))?;
    Ok(results)
}

/// Server mode: listen on `config.endpoint`, wait for the expected sites,
/// run, and write the reports.
pub fn run_server(config: &ExperimentConfig) -> Result<ExperimentTranscript, RunError> {
    config.validate()?;
    let listener = TcpListener::bind(&config.endpoint).map_err(|e| RunError::Transport(e.into()))?;
    let m = config.expected_sites();
    info!("listening on {} for {m} sites", config.endpoint);
    let mut hub = transport::accept_tcp(&listener, m)?;
    let transcript = serve(&mut hub, config.max_rounds, config.barrier_timeout())?;
    transcript.write(&config.out_dir, None)?;
    Ok(transcript)
}

/// Site mode: load `data`, connect to `config.endpoint` and take part until
/// the server terminates. Returns the site's final state.
pub fn run_site(config: &ExperimentConfig, data: &Path) -> Result<SiteState, RunError> {
    config.validate()?;
    let table = load_csv(data)?;
    let mut state = SiteState::prepare(&table, config.site_config(table.site_id()))?;
    let deadline = Instant::now() + Duration::from_secs(config.connect_timeout_secs);
    let mut link = loop {
        match TcpLink::connect(&config.endpoint) {
            Ok(link) => break link,
            Err(e) if Instant::now() < deadline => {
                info!("waiting for server at {}: {e}", config.endpoint);
                thread::sleep(Duration::from_millis(250));
            }
            Err(e) => return Err(e.into()),
        }
    };
    let round = participate(&mut link, &mut state)?;
    info!(
        "site {} done after round {round}: {} features, accuracy {:.4}",
        state.site_id(),
        state.current_features().size(),
        state.current_metrics().accuracy
    );
    Ok(state)
}
