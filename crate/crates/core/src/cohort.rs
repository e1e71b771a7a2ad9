//! Synthetic multi-site cohorts and the per-site CSV format.
//!
//! Every site shares one planted support: features whose patient mean is
//! shifted by `effect_size` noise standard deviations. All other features
//! are noise. Age, sex and ICV leak linearly into every feature so that
//! covariate residualization has something to remove, and each site gets
//! its own noise scale and covariate distribution.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::format_real;
use crate::tabular::{SubjectTable, TabularError};
use crate::wlasso::FeatureSet;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid cohort config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: schema error: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error("{path}: row {row}, column `{column}`: {reason}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        reason: String,
    },
    #[error("{path}: {source}")]
    Table {
        path: PathBuf,
        #[source]
        source: TabularError,
    },
    #[error(transparent)]
    Generate(#[from] TabularError),
}

/// Age distribution and sex ratio of one synthetic site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_mean: f64,
    pub age_sd: f64,
    pub female_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub site_sizes: Vec<usize>,
    /// Patients per site as a fraction of its subjects.
    pub patient_fractions: Vec<f64>,
    /// Defaults to `site1`, `site2`, ...
    pub site_ids: Option<Vec<String>>,
    pub n_features: usize,
    pub planted_support: usize,
    /// Patient mean shift on planted features, in noise standard deviations.
    pub effect_size: f64,
    /// Site noise scales are drawn uniformly from `[1, 1 + site_noise]`.
    pub site_noise: f64,
    /// How strongly standardized age, sex and ICV leak into the features.
    pub covariate_loadings: [f64; 3],
    /// Per-site demographics; sites beyond this list use a generic adult
    /// profile.
    pub demographics: Vec<Demographics>,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        let demo = |age_mean, age_sd, female_fraction| Demographics {
            age_mean,
            age_sd,
            female_fraction,
        };
        Self {
            site_sizes: vec![45, 110, 130, 172, 100],
            patient_fractions: vec![22.0 / 45.0, 54.0 / 110.0, 69.0 / 130.0, 101.0 / 172.0, 53.0 / 100.0],
            site_ids: None,
            n_features: 152,
            planted_support: 24,
            effect_size: 0.6,
            site_noise: 0.25,
            covariate_loadings: [0.3, 0.2, 0.4],
            demographics: vec![
                demo(42.96, 14.0, 0.7333),
                demo(37.96, 9.9, 0.60),
                demo(49.9, 8.6, 0.6077),
                demo(41.14, 12.2, 0.6047),
                demo(40.05, 11.7, 0.57),
            ],
            seed: 0,
        }
    }
}

const GENERIC_ADULT: Demographics = Demographics {
    age_mean: 40.0,
    age_sd: 12.0,
    female_fraction: 0.5,
};

impl CohortConfig {
    pub fn site_ids(&self) -> Vec<String> {
        self.site_ids
            .clone()
            .unwrap_or_else(|| (1..=self.site_sizes.len()).map(|i| format!("site{i}")).collect())
    }

    /// Patient count per site, `round(fraction * size)`.
    pub fn patient_counts(&self) -> Vec<usize> {
        self.site_sizes
            .iter()
            .zip(&self.patient_fractions)
            .map(|(&n, &f)| (f * n as f64).round() as usize)
            .collect()
    }

    fn validate(&self) -> Result<(), CohortError> {
        let invalid = |reason: String| Err(CohortError::InvalidConfig(reason));
        if self.site_sizes.is_empty() {
            return invalid("no sites".into());
        }
        if self.patient_fractions.len() != self.site_sizes.len() {
            return invalid(format!(
                "{} patient fractions for {} sites",
                self.patient_fractions.len(),
                self.site_sizes.len()
            ));
        }
        let ids = self.site_ids();
        if ids.len() != self.site_sizes.len() {
            return invalid(format!("{} site ids for {} sites", ids.len(), self.site_sizes.len()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return invalid(format!("duplicate site id `{dup}`"));
        }
        if self.n_features == 0 || self.planted_support > self.n_features {
            return invalid(format!(
                "planted support {} must not exceed {} features",
                self.planted_support, self.n_features
            ));
        }
        if !(self.effect_size.is_finite() && self.site_noise >= 0.0 && self.site_noise.is_finite()) {
            return invalid("effect size and site noise must be finite, site noise >= 0".into());
        }
        if self.covariate_loadings.iter().any(|l| !l.is_finite()) {
            return invalid("covariate loadings must be finite".into());
        }
        for (s, (&n, &f)) in self.site_sizes.iter().zip(&self.patient_fractions).enumerate() {
            if !(f > 0.0 && f < 1.0) {
                return invalid(format!("site {s}: patient fraction {f} outside (0, 1)"));
            }
            let patients = (f * n as f64).round() as usize;
            if patients < 2 || n < patients + 2 {
                return invalid(format!(
                    "site {s}: {n} subjects with fraction {f} gives {patients} patients; each class needs at least 2"
                ));
            }
        }
        for d in &self.demographics {
            if !(d.age_sd > 0.0 && (0.0..=1.0).contains(&d.female_fraction)) {
                return invalid(format!("invalid demographics {d:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub tables: Vec<SubjectTable>,
    pub planted_support: FeatureSet,
}

/// Seed of site `index`'s independent substream.
fn substream_seed(master: u64, index: usize) -> u64 {
    // splitmix64 finalizer over (master, index)
    let mut z = master ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn feature_names(n_features: usize) -> Vec<String> {
    let width = n_features.saturating_sub(1).to_string().len().max(3);
    (0..n_features).map(|j| format!("f{j:0width$}")).collect()
}

pub fn generate_cohort(config: &CohortConfig) -> Result<SyntheticCohort, CohortError> {
    config.validate()?;
    let p = config.n_features;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut support = index::sample(&mut master, p, config.planted_support).into_vec();
    support.sort_unstable();
    let planted = FeatureSet::new(support, p).expect("sampled indices are distinct and in range");

    // how strongly each feature picks up each covariate, shared by sites
    let leak = Array2::from_shape_fn((3, p), |(k, _)| {
        config.covariate_loadings[k] * master.random_range(0.5..1.5) * if master.random_bool(0.5) { 1.0 } else { -1.0 }
    });
    let names = feature_names(p);

    let tables = config
        .site_ids()
        .into_iter()
        .enumerate()
        .map(|(s, site_id)| {
            let demographics = config.demographics.get(s).copied().unwrap_or(GENERIC_ADULT);
            generate_site(config, s, &site_id, demographics, &planted, &leak, &names)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SyntheticCohort {
        tables,
        planted_support: planted,
    })
}

fn generate_site(
    config: &CohortConfig,
    s: usize,
    site_id: &str,
    demographics: Demographics,
    planted: &FeatureSet,
    leak: &Array2<f64>,
    names: &[String],
) -> Result<SubjectTable, CohortError> {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(config.seed, s));
    let n = config.site_sizes[s];
    let patients = config.patient_counts()[s];
    let mut labels: Vec<f64> = (0..n).map(|i| if i < patients { 1.0 } else { -1.0 }).collect();
    labels.shuffle(&mut rng);

    let noise_sd = 1.0 + config.site_noise * rng.random::<f64>();
    let age = Normal::new(demographics.age_mean, demographics.age_sd).expect("validated sd");
    let female = Bernoulli::new(demographics.female_fraction).expect("validated fraction");
    let offsets: Vec<f64> = (0..names.len()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();

    let mut covariates = Array2::zeros((n, 3));
    let mut features = Array2::zeros((n, names.len()));
    for i in 0..n {
        let a = age.sample(&mut rng).max(18.0);
        let sex = if female.sample(&mut rng) { 1.0 } else { 0.0 };
        let icv = 1.60e6 - 1.4e5 * sex + 1.2e5 * rng.sample::<f64, _>(StandardNormal);
        covariates[[i, 0]] = a;
        covariates[[i, 1]] = sex;
        covariates[[i, 2]] = icv;
        let z = [(a - 40.0) / 12.0, sex - 0.5, (icv - 1.5e6) / 1.5e5];
        for j in 0..names.len() {
            let mut v = offsets[j] + noise_sd * rng.sample::<f64, _>(StandardNormal);
            v += (0..3).map(|k| leak[[k, j]] * z[k]).sum::<f64>();
            if labels[i] > 0.0 && planted.contains(j) {
                v += config.effect_size * noise_sd;
            }
            features[[i, j]] = v;
        }
    }

    let subject_ids = (0..n).map(|i| format!("{site_id}-{:04}", i + 1)).collect();
    Ok(SubjectTable::new(
        site_id,
        subject_ids,
        names.to_vec(),
        features,
        covariates,
        Array1::from(labels),
    )?)
}

const FIXED_COLUMNS: [&str; 5] = ["subject_id", "label", "age", "sex", "icv"];

/// Writes `table` as `subject_id,label,age,sex,icv,<features...>`.
pub fn write_csv(table: &SubjectTable, path: &Path) -> Result<(), CohortError> {
    let io = |source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let header: Vec<&str> = FIXED_COLUMNS
        .iter()
        .copied()
        .chain(table.feature_names().iter().map(String::as_str))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    let features = table.features();
    let covariates = table.covariates();
    for (i, id) in table.subject_ids().iter().enumerate() {
        let label = if table.labels()[i] > 0.0 { "1" } else { "-1" };
        let sex = match covariates[[i, 1]] {
            v if v == 0.0 => "0".to_string(),
            v if v == 1.0 => "1".to_string(),
            v => format_real(v),
        };
        let mut line = format!(
            "{id},{label},{},{sex},{}",
            format_real(covariates[[i, 0]]),
            format_real(covariates[[i, 2]])
        );
        for v in features.row(i) {
            line.push(',');
            line.push_str(&format_real(*v));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a site CSV; the site id is the file stem.
pub fn load_csv(path: &Path) -> Result<SubjectTable, CohortError> {
    let site_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CohortError::Schema {
            path: path.to_path_buf(),
            reason: "file name is not valid UTF-8".into(),
        })?
        .to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CohortError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
    let schema = |reason: String| CohortError::Schema {
        path: path.to_path_buf(),
        reason,
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| schema(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    for (position, expected) in FIXED_COLUMNS.iter().enumerate() {
        match header.get(position) {
            Some(name) if name == expected => {}
            Some(name) => {
                return Err(schema(format!(
                    "missing column `{expected}`: found `{name}` at position {}",
                    position + 1
                )))
            }
            None => return Err(schema(format!("missing column `{expected}`"))),
        }
    }
    let feature_names: Vec<String> = header[FIXED_COLUMNS.len()..].to_vec();
    if feature_names.is_empty() {
        return Err(schema("no feature columns".into()));
    }

    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    let mut labels = Vec::new();
    let mut covariates = Vec::new();
    let mut features = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let parse_err = |column: &str, reason: String| CohortError::Parse {
            path: path.to_path_buf(),
            row,
            column: column.to_string(),
            reason,
        };
        let record = record.map_err(|e| parse_err("*", e.to_string()))?;
        if record.len() != header.len() {
            return Err(parse_err("*", format!("{} cells, header has {}", record.len(), header.len())));
        }
        let number = |c: usize| -> Result<f64, CohortError> {
            let cell = &record[c];
            let value: f64 = cell
                .parse()
                .map_err(|_| parse_err(&header[c], format!("`{cell}` is not a number")))?;
            if !value.is_finite() {
                return Err(parse_err(&header[c], format!("`{cell}` is not finite")));
            }
            Ok(value)
        };

        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_err("subject_id", "empty subject id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_err("subject_id", format!("duplicate subject id `{id}`")));
        }
        let label = match &record[1] {
            "1" => 1.0,
            "-1" => -1.0,
            other => return Err(parse_err("label", format!("`{other}` is not 1 or -1"))),
        };
        let sex = number(3)?;
        if sex != 0.0 && sex != 1.0 {
            return Err(parse_err("sex", format!("`{}` is not 0 or 1", &record[3])));
        }
        ids.push(id);
        labels.push(label);
        covariates.extend([number(2)?, sex, number(4)?]);
        for c in FIXED_COLUMNS.len()..header.len() {
            features.push(number(c)?);
        }
    }

    let n = ids.len();
    let p = feature_names.len();
    SubjectTable::new(
        site_id,
        ids,
        feature_names,
        Array2::from_shape_vec((n, p), features).expect("row lengths checked"),
        Array2::from_shape_vec((n, 3), covariates).expect("row lengths checked"),
        Array1::from(labels),
    )
    .map_err(|source| CohortError::Table {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes one `<site_id>.csv` per table into `dir`.
pub fn write_cohort(tables: &[SubjectTable], dir: &Path) -> Result<Vec<PathBuf>, CohortError> {
    std::fs::create_dir_all(dir).map_err(|source| CohortError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    tables
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.csv", t.site_id()));
            write_csv(t, &path).map(|_| path)
        })
        .collect()
}
