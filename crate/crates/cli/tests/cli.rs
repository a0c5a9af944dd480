use std::path::Path;
use std::process::{Command, Output};

use cdm_core::dataset::load_dense_csv;
use cdm_core::pipeline::{compute_psi, latent_embeddings};
use cdm_core::{CdmModel, Diagnostics, ExperimentReport};

fn cdm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdm"))
        .current_dir(dir)
        .env("CDM_THREADS", "2")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = cdm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .find_map(|l| l.strip_prefix("error: "))
        .unwrap_or_else(|| panic!("no error line in {stderr}"));
    serde_json::from_str(line).expect("machine-readable error line")
}

/// Synthetic pool plus a 3-per-class training file drawn from the same
/// domains.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out-dir", "pool", "--seed", "2"]);
    ok(dir.path(), &["synth", "--out-dir", "few", "--seed", "2", "--sm-per-class", "3"]);
    dir
}

#[test]
fn synth_files_load_back_with_matching_classes() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out-dir", "d", "--sm-per-class", "3", "--classes", "3"]);
    let ltm = load_dense_csv(dir.path().join("d/ltm.csv"), "label").unwrap();
    let sm = load_dense_csv(dir.path().join("d/sm.csv"), "label").unwrap();
    assert_eq!(ltm.features().dim(), (150, 40));
    assert_eq!(sm.features().dim(), (9, 25));
    assert_eq!(ltm.classes(), sm.classes());

    ok(dir.path(), &["synth", "--out-dir", "s", "--format", "libsvm"]);
    assert!(dir.path().join("s/ltm.libsvm").exists());

    let bad = cdm(dir.path(), &["synth", "--out-dir", "x", "--ltm-dim", "1"]);
    assert_eq!(error_json(&bad)["kind"], "invalid_argument");
}

#[test]
fn experiment_reports_are_complete_and_reproducible() {
    let dir = workspace();
    let args = [
        "experiment", "--ltm-path", "pool/ltm.csv", "--sm-path", "pool/sm.csv", "--rounds", "10", "--seed", "7",
    ];
    let a = ok(dir.path(), &[&args[..], &["--out", "a.json", "--csv", "a.csv"]].concat());
    ok(dir.path(), &[&args[..], &["--out", "b.json"]].concat());
    assert!(String::from_utf8_lossy(&a.stderr).contains("rounds=10"));

    let read = |name: &str| ExperimentReport::from_json(&std::fs::read_to_string(dir.path().join(name)).unwrap()).unwrap();
    let (ra, rb) = (read("a.json"), read("b.json"));
    assert_eq!(ra.payload.rounds.len(), 10);
    assert_eq!(ra.payload_json().unwrap(), rb.payload_json().unwrap());
    let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = workspace();
    std::fs::write(
        dir.path().join("exp.toml"),
        "ltm_path = \"pool/ltm.csv\"\nsm_path = \"pool/sm.csv\"\nrounds = 5\nclassifier = \"svm_rbf\"\n",
    )
    .unwrap();
    ok(dir.path(), &["experiment", "--config", "exp.toml", "--rounds", "2", "--p-approach", "graph_embedding", "--out", "r.json"]);
    let r = ExperimentReport::from_json(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r.payload.rounds.len(), 2);
    assert_eq!(r.payload.config.classifier, cdm_core::ClassifierKind::SvmRbf);
    assert_eq!(r.payload.config.p_approach, cdm_core::PApproach::GraphEmbedding);

    std::fs::write(dir.path().join("bad.toml"), "roundz = 5\n").unwrap();
    let bad = cdm(dir.path(), &["experiment", "--config", "bad.toml"]);
    assert_eq!(error_json(&bad)["kind"], "config");
}

#[test]
fn k_sweep_writes_one_report_per_k() {
    let dir = workspace();
    ok(
        dir.path(),
        &["experiment", "--ltm-path", "pool/ltm.csv", "--sm-path", "pool/sm.csv", "--rounds", "2", "--k-sweep", "3,4,5,6", "--out", "sweep.json"],
    );
    for k in 3..=6 {
        let text = std::fs::read_to_string(dir.path().join(format!("sweep-k{k}.json"))).unwrap();
        assert_eq!(ExperimentReport::from_json(&text).unwrap().payload.config.k_per_class, k);
    }
}

#[test]
fn fit_predict_and_diagnose() {
    let dir = workspace();
    let data = ["--ltm-path", "pool/ltm.csv", "--sm-path", "few/sm.csv"];
    ok(dir.path(), &[&["fit", "--model", "m.json", "--use-augmentation", "true"], &data[..]].concat());
    let model = CdmModel::load(dir.path().join("m.json")).unwrap();
    assert_eq!(model.feature_dim(), 2 + 25);

    let pred = ok(dir.path(), &[&["predict", "--model", "m.json", "--query", "pool/sm.csv"], &data[..]].concat());
    let text = String::from_utf8(pred.stdout).unwrap();
    assert_eq!(text.lines().count(), 151);
    assert_eq!(text.lines().next(), Some("row,predicted"));

    ok(
        dir.path(),
        &[&["diagnose", "--model", "m.json", "--holdout", "pool/sm.csv", "--psi-upper", "1e12", "--out", "diag.json"], &data[..]].concat(),
    );
    let diag: Diagnostics = serde_json::from_str(&std::fs::read_to_string(dir.path().join("diag.json")).unwrap()).unwrap();
    assert!(diag.radii.iter().all(|&r| r >= 0.0));
    if diag.disjoint {
        let c = diag.margins.nrows();
        assert!((0..c).all(|i| (0..c).all(|j| i == j || diag.margins[[i, j]] > 0.0)));
    }
    assert!(diag.bounds.unwrap().psi_s_within_upper);

    let ltm = load_dense_csv(dir.path().join("pool/ltm.csv"), "label").unwrap();
    let sm = load_dense_csv(dir.path().join("few/sm.csv"), "label").unwrap();
    let (u, v) = latent_embeddings(&model, &ltm, &sm).unwrap();
    let (psi_s, psi_d) = compute_psi(&u, &v).unwrap();
    assert_eq!(diag.psi_s.to_bits(), psi_s.to_bits());
    assert_eq!(diag.psi_d.to_bits(), psi_d.to_bits());
}

#[test]
fn failures_exit_nonzero_with_error_line() {
    let dir = workspace();
    let missing = cdm(dir.path(), &["fit", "--ltm-path", "nope.csv", "--sm-path", "few/sm.csv", "--model", "m.json"]);
    assert_eq!(error_json(&missing)["kind"], "io");

    std::fs::write(dir.path().join("corrupt.json"), "{\"format\":").unwrap();
    let corrupt = cdm(
        dir.path(),
        &["diagnose", "--model", "corrupt.json", "--holdout", "pool/sm.csv", "--ltm-path", "pool/ltm.csv", "--sm-path", "few/sm.csv"],
    );
    assert_eq!(error_json(&corrupt)["kind"], "serialization");

    let usage = cdm(dir.path(), &["experiment", "--rounds", "many"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_json(&usage)["kind"], "usage");

    let too_many = cdm(dir.path(), &["experiment", "--ltm-path", "pool/ltm.csv", "--sm-path", "few/sm.csv", "--k-per-class", "3"]);
    assert_eq!(error_json(&too_many)["kind"], "invalid_argument");
}
