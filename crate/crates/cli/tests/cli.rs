use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fluctoscope"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("failed to launch binary")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(path: &Path) -> Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

fn assert_schema(schema: &str, doc: &Path) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("schemas").join(schema);
    let validator = jsonschema::validator_for(&read(&path)).expect("schema compiles");
    let instance = read(doc);
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{} violates {schema}: {errors:#?}", doc.display());
}

/// Writes a config file that keeps runs small: a 16 × 16 camera and 60 frames.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    std::fs::write(&path, r#"{ "simulation": { "coarse_size": 16, "frames": 60, "seed": 3 } }"#).unwrap();
    path
}

fn simulate(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = small_config(dir);
    let data = dir.join("data");
    run_ok(&["simulate", "--preset", "LB", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    (data, cfg)
}

#[test]
fn simulate_writes_valid_sidecar() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = simulate(tmp.path());
    assert_schema("dataset.schema.json", &data.join("simulation.json"));
    let doc = read(&data.join("simulation.json"));
    assert_eq!(doc["config"]["coarse_size"], 16);
    assert_eq!(doc["config"]["frames"], 60);
    assert_eq!(doc["config"]["background_photons"], 50.0);
    for key in ["stack", "reference", "phantom", "gt_intensity", "gt_background", "gt_support"] {
        let name = doc["files"][key].as_str().unwrap();
        assert!(data.join(name).is_file(), "missing {name}");
    }
}

#[test]
fn fixed_mu_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = simulate(tmp.path());
    let recon = tmp.path().join("recon");
    run_ok(&[
        "reconstruct",
        data.to_str().unwrap(),
        recon.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--reg",
        "l1",
        "--mu",
        "0.5",
    ]);
    assert_schema("run_report.schema.json", &recon.join("report.json"));
    let report = read(&recon.join("report.json"));
    assert_eq!(report["intensity"]["mu_source"], "fixed");
    assert_eq!(report["intensity"]["mu_hat"], 0.5);
    assert_eq!(report["support"]["regularizer"], "l1");
    assert_eq!(report["support"]["restarts"], 0);
    for name in ["x.tif", "b.tif", "r_x.tif", "support.json", "previews.json", "x.png"] {
        assert!(recon.join(name).is_file(), "missing {name}");
    }
}

#[test]
fn discrepancy_mu_and_evaluation() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = simulate(tmp.path());
    let recon = tmp.path().join("recon");
    run_ok(&["reconstruct", data.to_str().unwrap(), "--out", recon.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--reg", "l1"]);
    let report = read(&recon.join("report.json"));
    assert_eq!(report["intensity"]["mu_source"], "discrepancy");
    assert!(report["intensity"]["mu_hat"].as_f64().unwrap() > 0.0);

    let out = run_ok(&["evaluate", recon.to_str().unwrap(), data.to_str().unwrap()]);
    assert_schema("eval_report.schema.json", &recon.join("eval.json"));
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let doc = read(&recon.join("eval.json"));
    assert_eq!(printed["jaccard"], doc["jaccard"]);
    assert!(recon.join("support_comparison.png").is_file());
}

#[test]
fn cel0_restarts_stay_within_bound() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = simulate(tmp.path());
    let recon = tmp.path().join("recon");
    run_ok(&[
        "reconstruct",
        data.to_str().unwrap(),
        recon.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--reg",
        "cel0",
        "--restarts",
        "3",
        "--mu",
        "1",
    ]);
    let report = read(&recon.join("report.json"));
    assert_eq!(report["support"]["max_restarts"], 3);
    assert!(report["support"]["restarts"].as_u64().unwrap() <= 3);
}

#[test]
fn restarts_rejected_for_convex_regularizers() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = simulate(tmp.path());
    let recon = tmp.path().join("recon");
    let out = run(&[
        "reconstruct",
        data.to_str().unwrap(),
        recon.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--reg",
        "l1",
        "--restarts",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_schema("error.schema.json", &recon.join("error.json"));
    assert_eq!(read(&recon.join("error.json"))["kind"], "config");
}

#[test]
fn missing_ground_truth_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = simulate(tmp.path());
    let recon = tmp.path().join("recon");
    run_ok(&["reconstruct", data.to_str().unwrap(), recon.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--reg", "l1", "--mu", "1"]);
    std::fs::remove_file(data.join("gt_support.json")).unwrap();

    let out = run(&["evaluate", recon.to_str().unwrap(), data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = recon.join("error.json");
    assert_schema("error.schema.json", &err);
    let err = read(&err);
    assert_eq!(err["kind"], "io");
    assert_eq!(err["solver_failure"], false);
    assert!(err["message"].as_str().unwrap().contains("gt_support.json"));
    assert!(!recon.join("eval.json").exists());
}

#[test]
fn ground_truth_scored_against_itself() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = simulate(tmp.path());
    let recon = tmp.path().join("recon");
    run_ok(&["reconstruct", data.to_str().unwrap(), recon.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--reg", "l1", "--mu", "1"]);
    std::fs::copy(data.join("gt_support.json"), recon.join("support.json")).unwrap();
    std::fs::copy(data.join("gt_intensity.tif"), recon.join("x.tif")).unwrap();

    run_ok(&["evaluate", recon.to_str().unwrap(), data.to_str().unwrap()]);
    assert_schema("eval_report.schema.json", &recon.join("eval.json"));
    let doc = read(&recon.join("eval.json"));
    assert_eq!(doc["jaccard"], 1.0);
    assert_eq!(doc["false_positives"], 0);
    assert_eq!(doc["false_negatives"], 0);
    assert_eq!(doc["correct_detections"], doc["truth_pixels"]);
    assert_eq!(doc["psnr_db"], "inf");
}

#[test]
fn lambda_max_reports_positive_threshold() {
    let tmp = TempDir::new().unwrap();
    let (data, cfg) = simulate(tmp.path());
    let out = run_ok(&["lambda-max", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--reg", "l1", "--gamma", "0.01"]);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let lmax = doc["lambda_max"].as_f64().unwrap();
    assert!(lmax > 0.0);
    assert_eq!(doc["regularizer"], "l1");
    let lambda = doc["lambda"].as_f64().unwrap();
    assert!((lambda - 0.01 * lmax).abs() <= 1e-12 * lmax);
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let (data, _) = simulate(tmp.path());
    let cfg = tmp.path().join("override.json");
    std::fs::write(
        &cfg,
        r#"{ "simulation": { "coarse_size": 16, "frames": 60 },
             "reconstruction": { "regularizer": "l1", "gamma": 0.001, "mu": 2.0, "intensity": { "beta": 10.0 } } }"#,
    )
    .unwrap();
    let recon = tmp.path().join("recon");
    run_ok(&["reconstruct", data.to_str().unwrap(), recon.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--gamma", "0.002"]);
    let report = read(&recon.join("report.json"));
    assert_eq!(report["support"]["regularizer"], "l1");
    assert_eq!(report["support"]["gamma"], 0.002);
    assert_eq!(report["intensity"]["mu_hat"], 2.0);
    assert_eq!(report["intensity"]["settings"]["beta"], 10.0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "reconstruction": { "gama": 0.1 } }"#).unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_schema("error.schema.json", &out_dir.join("error.json"));
}

#[test]
fn pipeline_writes_all_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("run");
    run_ok(&["pipeline", "--preset", "HB", "--config", cfg.to_str().unwrap(), "--reg", "l1", "--out", out.to_str().unwrap()]);
    assert_schema("pipeline_report.schema.json", &out.join("pipeline.json"));
    let doc = read(&out.join("pipeline.json"));
    assert_eq!(doc["config"]["preset"], "HB");
    assert_schema("dataset.schema.json", &out.join(doc["dataset"].as_str().unwrap()));
    assert_schema("run_report.schema.json", &out.join(doc["reconstruction"].as_str().unwrap()));
    assert_schema("eval_report.schema.json", &out.join(doc["evaluation"].as_str().unwrap()));
}
