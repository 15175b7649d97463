//! Conformal sets for whole-graph labels, with a mean readout.

use serde_json::json;
use tempered_cp::{run_experiment, sweep_report, ExperimentConfig};

fn main() -> tempered_cp::Result<()> {
    let config: ExperimentConfig = serde_json::from_value(json!({
        "dataset": {
            "kind": "graph-set",
            "num_graphs": 600,
            "num_classes": 3,
            "min_nodes": 6,
            "max_nodes": 14,
            "edge_prob": 0.3,
            "feature_noise": 1.5
        },
        "model": "bayesian",
        "beta_grid": [0.0, 1.0, 10.0],
        "readout": "mean",
        "hidden": [16, 16],
        "T": 10,
        "epochs": 100,
        "lr": 0.01,
        "drop_rate": 0.2,
        "n_trials": 20,
        "split": { "train": 150, "calibration": 200, "test": 250 }
    }))
    .expect("valid config");
    config.validate()?;
    let table = run_experiment(&config)?;
    for cell in sweep_report(&table.rows).cells {
        println!(
            "beta {:?}: accuracy {:.3} coverage {:.3} inefficiency {:.3}",
            cell.beta, cell.accuracy.mean, cell.coverage.mean, cell.inefficiency.mean
        );
    }
    Ok(())
}
