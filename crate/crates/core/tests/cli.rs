use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempered_cp::experiments::{read_results_csv, sweep_report};
use tempered_cp::{generate_sbm, save_bundle, RngState, SbmSpec};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempered-cp")).args(args).output().unwrap()
}

fn small_config(extra: Value) -> Value {
    let mut config = json!({
        "dataset": {
            "kind": "sbm",
            "communities": 3,
            "nodes_per_community": 60,
            "p_in": 0.1,
            "p_out": 0.01,
            "feature_noise": 0.8,
            "label_noise": 0.0
        },
        "model": "bayesian",
        "beta_grid": [0.0, 1.0],
        "epochs": 20,
        "n_trials": 4,
        "T": 4,
        "split": { "train": 30, "calibration": 60, "test": 60 }
    });
    for (k, v) in extra.as_object().unwrap() {
        config[k] = v.clone();
    }
    config
}

fn write_config(dir: &Path, config: &Value) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_outputs_and_report_matches_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config(json!({})));
    let out = dir.path().join("out");
    let o = cli(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--parallel", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "summary.json", "boxplot.json", "failures.json", "reliability_0.csv", "reliability_1.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let rows = read_results_csv(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    let summary: Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, serde_json::to_value(sweep_report(&rows)).unwrap());

    let o = cli(&["sweep-report", "--in", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, summary);
}

#[test]
fn seed_flag_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config(json!({"model": "frequentist", "beta_grid": []})));
    let read = |seed: &str| {
        let out = dir.path().join(seed);
        let o = cli(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(out.join("results.csv")).unwrap()
    };
    assert_eq!(read("1"), read("1"));
    assert_ne!(read("1"), read("2"));
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["run", "--config", "/nonexistent/config.json", "--out", out]).status.code(), Some(1));

    let bad_alpha = write_config(dir.path(), &small_config(json!({"alpha": 1.5})));
    assert_eq!(cli(&["run", "--config", &bad_alpha, "--out", out]).status.code(), Some(1));

    let unknown = write_config(dir.path(), &small_config(json!({"learning_rate": 0.1})));
    assert_eq!(cli(&["run", "--config", &unknown, "--out", out]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        &small_config(json!({"dataset": {"kind": "bundle", "path": "missing_bundle"}})),
    );
    let out = dir.path().join("out");
    let o = cli(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(cli(&["convert-check", "--bundle", "/nonexistent"]).status.code(), Some(2));
    assert_eq!(cli(&["sweep-report", "--in", "/nonexistent"]).status.code(), Some(2));
}

#[test]
fn all_cells_failing_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config(json!({"lr": 1e300})));
    let out = dir.path().join("out");
    let o = cli(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let failures: Value = serde_json::from_slice(&std::fs::read(out.join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures.as_array().unwrap().len(), 2);
}

#[test]
fn convert_check_reports_bundle_stats() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SbmSpec {
        communities: 2,
        nodes_per_community: 10,
        p_in: 0.5,
        p_out: 0.05,
        feature_noise: 0.5,
        label_noise: 0.0,
    };
    let bundle = generate_sbm(&mut RngState::new(1), &spec).unwrap();
    save_bundle(&bundle, dir.path()).unwrap();
    let o = cli(&["convert-check", "--bundle", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let stats: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["num_nodes"], 20);
    assert_eq!(stats["num_classes"], 2);
    assert_eq!(stats["num_edges"], bundle.undirected_edge_count());
    assert_eq!(stats["feature_dim"], bundle.feature_dim());
}
