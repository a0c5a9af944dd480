//! The repeated few-shot evaluation protocol.
//!
//! Each round draws `k_per_class` SM training instances per class, fits CDM on
//! the full LTM set plus that draw, and scores both CDM and the SM-only
//! baseline on the remaining SM instances.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{accuracy, ClassifierKind, ClassifierSpec, Gamma};
use crate::dataset::{
    load_dense_csv, load_sparse_libsvm, pca_apply, pca_fit, sample_split, LabeledDataset, SplitSpec,
};
use crate::error::{CdmError, Result};
use crate::pipeline::{
    align_classes, baseline_predict, cdm_fit, cdm_predict, hypothesis_check, CdmConfig, Diagnostics,
    LatentDim, PApproach,
};

const LTM_SEED_MASK: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    #[default]
    Csv,
    Libsvm,
}

/// Which SM features the baseline classifier sees when PCA is configured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineFeatures {
    #[default]
    Raw,
    Pca,
}

/// Flat experiment configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ltm_path: Option<PathBuf>,
    pub sm_path: Option<PathBuf>,
    pub format: DataFormat,
    pub label_column: String,
    /// Feature dimensions, required for the sparse format.
    pub ltm_dim: Option<usize>,
    pub sm_dim: Option<usize>,

    pub p_approach: PApproach,
    pub latent_dim: LatentDim,
    pub eta: f64,
    pub use_augmentation: bool,
    pub block_rescale: bool,
    pub standardize: bool,
    pub q_intercept: bool,
    pub psi_squared: bool,

    pub classifier: ClassifierKind,
    pub knn_k: usize,
    pub svm_c: f64,
    pub svm_gamma: Gamma,
    pub svm_tol: f64,

    pub k_per_class: usize,
    /// LTM instances drawn per class each round; the full LTM set when absent.
    pub ltm_per_class: Option<usize>,
    pub rounds: usize,
    pub seed: u64,
    /// PCA energy applied to each domain separately; no PCA when absent.
    pub pca_energy: Option<f64>,
    pub baseline_features: BaselineFeatures,
    /// Compute per-round geometry and hypothesis diagnostics.
    pub diagnostics: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cdm = CdmConfig::default();
        let spec = cdm.classifier;
        Self {
            ltm_path: None,
            sm_path: None,
            format: DataFormat::Csv,
            label_column: "label".into(),
            ltm_dim: None,
            sm_dim: None,
            p_approach: cdm.p_approach,
            latent_dim: cdm.latent_dim,
            eta: cdm.eta,
            use_augmentation: cdm.use_augmentation,
            block_rescale: cdm.block_rescale,
            standardize: cdm.standardize,
            q_intercept: cdm.q_intercept,
            psi_squared: cdm.psi_squared,
            classifier: spec.kind,
            knn_k: spec.k,
            svm_c: spec.svm_c,
            svm_gamma: spec.svm_gamma,
            svm_tol: spec.svm_tol,
            k_per_class: 3,
            ltm_per_class: None,
            rounds: 10,
            seed: 0,
            pca_energy: None,
            baseline_features: BaselineFeatures::Raw,
            diagnostics: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CdmError::Config(e.message().to_string()))
    }

    /// Reads a TOML file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CdmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.ltm_path, &mut cfg.sm_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec {
            kind: self.classifier,
            k: self.knn_k,
            svm_c: self.svm_c,
            svm_gamma: self.svm_gamma,
            svm_tol: self.svm_tol,
        }
    }

    pub fn cdm_config(&self) -> CdmConfig {
        CdmConfig {
            p_approach: self.p_approach,
            latent_dim: self.latent_dim,
            eta: self.eta,
            use_augmentation: self.use_augmentation,
            classifier: self.classifier_spec(),
            block_rescale: self.block_rescale,
            standardize: self.standardize,
            q_intercept: self.q_intercept,
            psi_squared: self.psi_squared,
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        SplitSpec::new(self.k_per_class, self.seed, self.rounds)
    }

    /// LTM subsampling draw, on a seed independent of the SM draw.
    pub fn ltm_split_spec(&self) -> Result<Option<SplitSpec>> {
        self.ltm_per_class
            .map(|k| SplitSpec::new(k, self.seed ^ LTM_SEED_MASK, self.rounds))
            .transpose()
    }

    pub fn validate(&self) -> Result<()> {
        self.cdm_config().validate()?;
        self.split_spec()?;
        self.ltm_split_spec()?;
        if let Some(e) = self.pca_energy {
            if !(e > 0.0 && e <= 1.0) {
                return Err(CdmError::Config(format!("pca_energy must lie in (0, 1], got {e}")));
            }
        }
        Ok(())
    }
}

/// Reads one data file with the format settings of `cfg`, tagging it `which`.
pub fn load_domain_file(path: &Path, dim: Option<usize>, cfg: &ExperimentConfig, which: &str) -> Result<LabeledDataset> {
    let data = match cfg.format {
        DataFormat::Csv => load_dense_csv(path, &cfg.label_column)?,
        DataFormat::Libsvm => {
            let dim = dim.ok_or_else(|| CdmError::Config(format!("{which}_dim is required for libsvm input")))?;
            load_sparse_libsvm(path, dim)?
        }
    };
    Ok(data.with_tag(which))
}

fn load_domain(path: &Option<PathBuf>, dim: Option<usize>, cfg: &ExperimentConfig, which: &str) -> Result<LabeledDataset> {
    let path = path
        .as_ref()
        .ok_or_else(|| CdmError::Config(format!("{which}_path is required")))?;
    load_domain_file(path, dim, cfg, which)
}

/// Loads the LTM and SM datasets named by `cfg`.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((
        load_domain(&cfg.ltm_path, cfg.ltm_dim, cfg, "ltm")?,
        load_domain(&cfg.sm_path, cfg.sm_dim, cfg, "sm")?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub cdm_accuracy: f64,
    pub baseline_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub diagnostics: Option<Diagnostics>,
}

/// Mean and sample standard deviation, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_dev: f64,
}

impl Summary {
    pub fn of_fractions(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std_dev: 0.0 };
        }
        let pct: Vec<f64> = values.iter().map(|v| 100.0 * v).collect();
        let mean = pct.iter().sum::<f64>() / n as f64;
        let std_dev = if n > 1 {
            (pct.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_dev }
    }
}

/// Everything in a report that depends only on inputs, config and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPayload {
    pub config: ExperimentConfig,
    pub classes: Vec<String>,
    pub ltm_features: usize,
    pub sm_features: usize,
    pub rounds: Vec<RoundResult>,
    pub cdm: Summary,
    pub baseline: Summary,
    /// Fraction of rounds where the combined-domain classifier erred no more
    /// than the SM-only one.
    pub combined_no_worse_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub payload: ReportPayload,
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CdmError::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CdmError::Serialization(e.to_string()))
    }

    /// Serialized payload, the part that must be reproducible byte for byte.
    pub fn payload_json(&self) -> Result<String> {
        serde_json::to_string(&self.payload).map_err(|e| CdmError::Serialization(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: csv::Error| CdmError::Serialization(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["round", "cdm_accuracy", "baseline_accuracy", "train_size", "test_size"])
            .map_err(io)?;
        for r in &self.payload.rounds {
            w.write_record([
                r.round.to_string(),
                r.cdm_accuracy.to_string(),
                r.baseline_accuracy.to_string(),
                r.train_size.to_string(),
                r.test_size.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|source| CdmError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Loads the configured data files and runs the protocol.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (ltm, sm) = load_datasets(cfg)?;
    run_experiment_on(cfg, &ltm, &sm)
}

/// Runs the protocol on in-memory datasets; data paths in `cfg` are ignored.
pub fn run_experiment_on(cfg: &ExperimentConfig, ltm: &LabeledDataset, sm: &LabeledDataset) -> Result<ExperimentReport> {
    let start = Instant::now();
    cfg.validate()?;
    let sm_raw = align_classes(sm, ltm.classes())?;
    let split_spec = cfg.split_spec()?;
    split_spec.validate(&sm_raw)?;
    let ltm_spec = cfg.ltm_split_spec()?;
    if let Some(spec) = &ltm_spec {
        spec.validate(ltm)?;
    }

    let (ltm_in, sm_in) = match cfg.pca_energy {
        Some(energy) => {
            let lp = pca_fit(ltm, energy).map_err(CdmError::at("LTM PCA"))?;
            let sp = pca_fit(&sm_raw, energy).map_err(CdmError::at("SM PCA"))?;
            (pca_apply(&lp, ltm)?, pca_apply(&sp, &sm_raw)?)
        }
        None => (ltm.clone(), sm_raw.clone()),
    };
    let baseline_pool = match cfg.baseline_features {
        BaselineFeatures::Raw => &sm_raw,
        BaselineFeatures::Pca => &sm_in,
    };

    let cdm_cfg = cfg.cdm_config();
    let spec = cfg.classifier_spec();
    let rounds: Vec<RoundResult> = (0..cfg.rounds)
        .into_par_iter()
        .map(|round| {
            let split = sample_split(&sm_in, &split_spec, round)?;
            if split.test.is_empty() {
                return Err(CdmError::InvalidArgument(format!(
                    "round {round}: no SM instances left for testing"
                )));
            }
            let ltm_draw;
            let ltm_round = match &ltm_spec {
                Some(spec) => {
                    ltm_draw = sample_split(&ltm_in, spec, round)?.train;
                    &ltm_draw
                }
                None => &ltm_in,
            };
            let model = cdm_fit(ltm_round, &split.train, &cdm_cfg)
                .map_err(CdmError::at("cdm fit"))?;
            let pred = cdm_predict(&model, ltm_round, &split.train, split.test.features().view())?;
            let cdm_accuracy = accuracy(&pred, split.test.labels())?;

            let base = sample_split(baseline_pool, &split_spec, round)?;
            let base_pred = baseline_predict(&spec, &base.train, base.test.features().view())
                .map_err(CdmError::at("baseline"))?;
            let baseline_accuracy = accuracy(&base_pred, base.test.labels())?;

            let diagnostics = if cfg.diagnostics {
                Some(hypothesis_check(&model, ltm_round, &split.train, &split.test, &spec)?)
            } else {
                None
            };
            log::info!(
                "round {round}: cdm {:.2}%, baseline {:.2}%",
                100.0 * cdm_accuracy,
                100.0 * baseline_accuracy
            );
            Ok(RoundResult {
                round,
                cdm_accuracy,
                baseline_accuracy,
                train_size: split.train.len(),
                test_size: split.test.len(),
                diagnostics,
            })
        })
        .collect::<Result<_>>()?;

    let cdm: Vec<f64> = rounds.iter().map(|r| r.cdm_accuracy).collect();
    let base: Vec<f64> = rounds.iter().map(|r| r.baseline_accuracy).collect();
    let combined_no_worse_rate = cfg.diagnostics.then(|| {
        let ok = rounds
            .iter()
            .filter(|r| r.diagnostics.as_ref().is_some_and(|d| d.combined_no_worse()))
            .count();
        ok as f64 / rounds.len() as f64
    });
    let payload = ReportPayload {
        config: cfg.clone(),
        classes: ltm.classes().to_vec(),
        ltm_features: ltm_in.dim(),
        sm_features: sm_in.dim(),
        cdm: Summary::of_fractions(&cdm),
        baseline: Summary::of_fractions(&base),
        rounds,
        combined_no_worse_rate,
    };
    Ok(ExperimentReport {
        payload,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
