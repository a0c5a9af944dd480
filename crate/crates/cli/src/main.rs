//! `cdm`: few-shot experiments, synthetic benchmarks, model fitting and
//! diagnostics from the command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdm_core::dataset::{write_dense_csv, write_sparse_libsvm};
use cdm_core::experiment::{load_datasets, load_domain_file, run_experiment, DataFormat};
use cdm_core::pipeline::{align_classes, hypothesis_check};
use cdm_core::synth::generate;
use cdm_core::{cdm_fit, cdm_predict, CdmError, CdmModel, ExperimentConfig, ExperimentReport, Result, SynthParams};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "cdm", version, about = "Few-shot classification boosted by a heterogeneous auxiliary domain")]
struct Cli {
    /// Worker threads for parallel experiment rounds.
    #[arg(long, env = "CDM_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the repeated few-shot protocol and write a report.
    Experiment(ExperimentArgs),
    /// Generate a synthetic LTM/SM dataset pair.
    Synth(SynthArgs),
    /// Fit a model on an LTM set and an SM training set.
    Fit(FitArgs),
    /// Label SM query instances with a fitted model.
    Predict(PredictArgs),
    /// Report latent-space geometry and holdout errors of a fitted model.
    Diagnose(DiagnoseArgs),
}

/// Parses a flag value the way the config file would: JSON first, then as a
/// bare string, so `auto`, `lda`, `2` and `0.5` all work.
fn config_value<T: DeserializeOwned>(raw: &str) -> std::result::Result<T, String> {
    serde_json::from_str(raw)
        .or_else(|_| serde_json::from_value(serde_json::Value::String(raw.to_string())))
        .map_err(|e| e.to_string())
}

#[derive(Args, Default)]
struct DataArgs {
    /// TOML config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ltm_path: Option<PathBuf>,
    #[arg(long)]
    sm_path: Option<PathBuf>,
    /// `csv` or `libsvm`.
    #[arg(long, value_parser = config_value::<DataFormat>)]
    format: Option<DataFormat>,
    #[arg(long)]
    label_column: Option<String>,
    #[arg(long)]
    ltm_dim: Option<usize>,
    #[arg(long)]
    sm_dim: Option<usize>,
}

#[derive(Args, Default)]
struct CdmArgs {
    /// `lda`, `graph_embedding` or `fixed_medians`.
    #[arg(long, value_parser = config_value::<cdm_core::PApproach>)]
    p_approach: Option<cdm_core::PApproach>,
    /// A positive integer or `auto`.
    #[arg(long, value_parser = config_value::<cdm_core::LatentDim>)]
    latent_dim: Option<cdm_core::LatentDim>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    use_augmentation: Option<bool>,
    #[arg(long)]
    block_rescale: Option<bool>,
    #[arg(long)]
    standardize: Option<bool>,
    #[arg(long)]
    q_intercept: Option<bool>,
    #[arg(long)]
    psi_squared: Option<bool>,
    /// `knn` or `svm_rbf`.
    #[arg(long, value_parser = config_value::<cdm_core::ClassifierKind>)]
    classifier: Option<cdm_core::ClassifierKind>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    svm_c: Option<f64>,
    /// A positive number or `auto`.
    #[arg(long, value_parser = config_value::<cdm_core::Gamma>)]
    svm_gamma: Option<cdm_core::Gamma>,
    #[arg(long)]
    svm_tol: Option<f64>,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    k_per_class: Option<usize>,
    #[arg(long)]
    ltm_per_class: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pca_energy: Option<f64>,
    /// `raw` or `pca`.
    #[arg(long, value_parser = config_value::<cdm_core::experiment::BaselineFeatures>)]
    baseline_features: Option<cdm_core::experiment::BaselineFeatures>,
    #[arg(long)]
    diagnostics: Option<bool>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cdm: CdmArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-round CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Run once per listed `k_per_class`, e.g. `3,4,5,6`. Each report is
    /// written next to `--out` with a `-k<k>` suffix.
    #[arg(long, value_delimiter = ',')]
    k_sweep: Option<Vec<usize>>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving `ltm.<ext>` and `sm.<ext>`.
    #[arg(long)]
    out_dir: PathBuf,
    /// `csv` or `libsvm`.
    #[arg(long, default_value = "csv", value_parser = config_value::<DataFormat>)]
    format: DataFormat,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    ltm_dim: Option<usize>,
    #[arg(long)]
    sm_dim: Option<usize>,
    #[arg(long)]
    ltm_per_class: Option<usize>,
    #[arg(long)]
    sm_per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    gain_spread: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cdm: CdmArgs,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// SM instances to label, in the same format as the SM training file.
    #[arg(long)]
    query: PathBuf,
    /// Predictions CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Labeled SM instances held out from training.
    #[arg(long)]
    holdout: PathBuf,
    /// Upper bound reported against ψ_S.
    #[arg(long)]
    psi_upper: Option<f64>,
    /// Lower bound reported against ψ_D.
    #[arg(long)]
    psi_lower: Option<f64>,
    /// Diagnostics file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn base_config(data: &DataArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &data.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    set(&mut cfg.ltm_path, data.ltm_path.clone().map(Some));
    set(&mut cfg.sm_path, data.sm_path.clone().map(Some));
    set(&mut cfg.format, data.format);
    set(&mut cfg.label_column, data.label_column.clone());
    set(&mut cfg.ltm_dim, data.ltm_dim.map(Some));
    set(&mut cfg.sm_dim, data.sm_dim.map(Some));
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_cdm(cfg: &mut ExperimentConfig, a: &CdmArgs) {
    set(&mut cfg.p_approach, a.p_approach);
    set(&mut cfg.latent_dim, a.latent_dim);
    set(&mut cfg.eta, a.eta);
    set(&mut cfg.use_augmentation, a.use_augmentation);
    set(&mut cfg.block_rescale, a.block_rescale);
    set(&mut cfg.standardize, a.standardize);
    set(&mut cfg.q_intercept, a.q_intercept);
    set(&mut cfg.psi_squared, a.psi_squared);
    set(&mut cfg.classifier, a.classifier);
    set(&mut cfg.knn_k, a.knn_k);
    set(&mut cfg.svm_c, a.svm_c);
    set(&mut cfg.svm_gamma, a.svm_gamma);
    set(&mut cfg.svm_tol, a.svm_tol);
}

fn apply_protocol(cfg: &mut ExperimentConfig, a: &ProtocolArgs) {
    set(&mut cfg.k_per_class, a.k_per_class);
    set(&mut cfg.ltm_per_class, a.ltm_per_class.map(Some));
    set(&mut cfg.rounds, a.rounds);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.pca_energy, a.pca_energy.map(Some));
    set(&mut cfg.baseline_features, a.baseline_features);
    set(&mut cfg.diagnostics, a.diagnostics);
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(path) => std::fs::write(path, text).map_err(|source| CdmError::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => match writeln!(std::io::stdout().lock(), "{text}") {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CdmError::Io {
                path: PathBuf::from("<stdout>"),
                source: e,
            }),
            _ => Ok(()),
        },
    }
}

fn suffixed(path: &Path, k: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-k{k}.{ext}"),
        None => format!("{stem}-k{k}"),
    };
    path.with_file_name(name)
}

fn summary_line(report: &ExperimentReport) -> String {
    let p = &report.payload;
    format!(
        "k={} rounds={} cdm={:.2}±{:.2} baseline={:.2}±{:.2}",
        p.config.k_per_class,
        p.rounds.len(),
        p.cdm.mean,
        p.cdm.std_dev,
        p.baseline.mean,
        p.baseline.std_dev
    )
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let mut cfg = base_config(&a.data)?;
    apply_cdm(&mut cfg, &a.cdm);
    apply_protocol(&mut cfg, &a.protocol);
    let Some(ks) = &a.k_sweep else {
        let report = run_experiment(&cfg)?;
        eprintln!("{}", summary_line(&report));
        if let Some(csv) = &a.csv {
            report.write_csv(csv)?;
        }
        return write_text(a.out.as_deref(), &report.to_json()?);
    };
    let mut reports = Vec::with_capacity(ks.len());
    for &k in ks {
        let report = run_experiment(&ExperimentConfig { k_per_class: k, ..cfg.clone() })?;
        eprintln!("{}", summary_line(&report));
        if let Some(csv) = &a.csv {
            report.write_csv(suffixed(csv, k))?;
        }
        if let Some(out) = &a.out {
            write_text(Some(&suffixed(out, k)), &report.to_json()?)?;
        }
        reports.push(report);
    }
    if a.out.is_none() {
        let json = serde_json::to_string_pretty(&reports).map_err(|e| CdmError::Serialization(e.to_string()))?;
        write_text(None, &json)?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut p = SynthParams::default();
    set(&mut p.classes, a.classes);
    set(&mut p.latent_dim, a.latent_dim);
    set(&mut p.ltm_dim, a.ltm_dim);
    set(&mut p.sm_dim, a.sm_dim);
    set(&mut p.ltm_per_class, a.ltm_per_class);
    set(&mut p.sm_per_class, a.sm_per_class);
    set(&mut p.noise, a.noise);
    set(&mut p.gain_spread, a.gain_spread);
    set(&mut p.seed, a.seed);
    let data = generate(&p)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|source| CdmError::Io {
        path: a.out_dir.clone(),
        source,
    })?;
    for (name, set) in [("ltm", &data.ltm), ("sm", &data.sm)] {
        match a.format {
            DataFormat::Csv => write_dense_csv(a.out_dir.join(format!("{name}.csv")), set, "label")?,
            DataFormat::Libsvm => write_sparse_libsvm(a.out_dir.join(format!("{name}.libsvm")), set)?,
        }
    }
    eprintln!(
        "wrote {} LTM and {} SM instances to {}",
        data.ltm.len(),
        data.sm.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let mut cfg = base_config(&a.data)?;
    apply_cdm(&mut cfg, &a.cdm);
    if cfg.pca_energy.is_some() {
        return Err(CdmError::Config("pca_energy is only supported by `experiment`".into()));
    }
    let (ltm, sm) = load_datasets(&cfg)?;
    let model = cdm_fit(&ltm, &sm, &cfg.cdm_config())?;
    model.save(&a.model)?;
    eprintln!(
        "fitted {} classes, latent dimension {}, classifier input dimension {}",
        model.classes.len(),
        model.latent_dim(),
        model.feature_dim()
    );
    Ok(())
}

fn load_query(cfg: &ExperimentConfig, path: &Path) -> Result<cdm_core::LabeledDataset> {
    load_domain_file(path, cfg.sm_dim, cfg, "sm")
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let cfg = base_config(&a.data)?;
    let model = CdmModel::load(&a.model)?;
    let (ltm, sm) = load_datasets(&cfg)?;
    let query = load_query(&cfg, &a.query)?;
    let pred = cdm_predict(&model, &ltm, &sm, query.features().view())?;
    let truth = query.label_names();
    let mut text = String::from("row,predicted");
    let mut hits = 0;
    for (i, &p) in pred.iter().enumerate() {
        let name = &model.classes[p];
        hits += usize::from(*name == truth[i]);
        text.push_str(&format!("\n{i},{name}"));
    }
    if query.classes().iter().all(|c| model.classes.contains(c)) {
        eprintln!("accuracy against query labels: {:.2}%", 100.0 * hits as f64 / pred.len() as f64);
    }
    write_text(a.out.as_deref(), &text)
}

fn cmd_diagnose(a: &DiagnoseArgs) -> Result<()> {
    let cfg = base_config(&a.data)?;
    let model = CdmModel::load(&a.model)?;
    let (ltm, sm) = load_datasets(&cfg)?;
    let holdout = align_classes(&load_query(&cfg, &a.holdout)?, &model.classes)?;
    let mut diag = hypothesis_check(&model, &ltm, &sm, &holdout, &model.config.classifier)?;
    if a.psi_upper.is_some() || a.psi_lower.is_some() {
        diag = diag.with_bounds(a.psi_upper.unwrap_or(f64::INFINITY), a.psi_lower.unwrap_or(0.0));
    }
    eprintln!(
        "psi_s={} psi_d={} disjoint={} err_combined={:.4} err_sm_only={:.4}",
        diag.psi_s, diag.psi_d, diag.disjoint, diag.err_combined, diag.err_sm_only
    );
    let json = serde_json::to_string_pretty(&diag).map_err(|e| CdmError::Serialization(e.to_string()))?;
    write_text(a.out.as_deref(), &json)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CdmError::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Experiment(a) => cmd_experiment(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

fn error_line(kind: &str, message: &str) {
    eprintln!("error: {}", serde_json::json!({ "kind": kind, "message": message }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_line("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}
