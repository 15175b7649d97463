//! A β sweep over a noisy SBM, written to a results directory. The config
//! is the same JSON the `run` subcommand reads.
//!
//! Usage: `cargo run --release --example tempered_sweep [out_dir]`

use serde_json::json;
use tempered_cp::{emit_outputs, run_experiment, sweep_report, ExperimentConfig};

fn main() -> tempered_cp::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sweep_out".into());
    let config: ExperimentConfig = serde_json::from_value(json!({
        "dataset": {
            "kind": "sbm",
            "communities": 4,
            "nodes_per_community": 300,
            "p_in": 0.025,
            "p_out": 0.0025,
            "feature_noise": 1.0,
            "label_noise": 0.2
        },
        "model": "bayesian",
        "beta_grid": [0.0, 0.1, 1.0, 10.0, 100.0],
        "T": 20,
        "epochs": 80,
        "lr": 0.01,
        "drop_rate": 0.3,
        "n_trials": 20,
        "split": { "train": 140, "calibration": 400, "test": 600 }
    }))
    .expect("valid config");
    config.validate()?;

    let table = run_experiment(&config)?;
    emit_outputs(&table, &out)?;
    let report = sweep_report(&table.rows);
    for cell in &report.cells {
        println!(
            "beta {:>6}: coverage {:.3} inefficiency {:.3} ± {:.3}",
            cell.beta.map_or("-".into(), |b| b.to_string()),
            cell.coverage.mean,
            cell.inefficiency.mean,
            cell.inefficiency.std
        );
    }
    println!("best beta {:?}; outputs in {out}", report.best_beta);
    Ok(())
}
