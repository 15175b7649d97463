use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tempered_cp::experiments::{emit_outputs, read_results_csv, run_experiment, sweep_report, ExperimentConfig};
use tempered_cp::{load_bundle, Error};

#[derive(Parser)]
#[command(version, about = "Conformal prediction on tempered Bayesian GCNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configured sweep and write results into a directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Recompute the summary of a results directory and print it.
    SweepReport {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Validate a graph bundle and print its statistics.
    ConvertCheck {
        #[arg(long)]
        bundle: PathBuf,
    },
}

const CONFIG_ERROR: u8 = 1;
const DATA_ERROR: u8 = 2;
const TRAINING_FAILURE: u8 = 3;

fn data_or_config(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Json { .. } => CONFIG_ERROR,
        _ => DATA_ERROR,
    }
}

fn fail(code: u8, e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}

fn run(config: PathBuf, out: PathBuf, seed: Option<u64>, parallel: Option<usize>) -> ExitCode {
    let mut config = match ExperimentConfig::from_file(&config) {
        Ok(c) => c,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(parallel.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    let table = match pool.install(|| run_experiment(&config)) {
        Ok(t) => t,
        Err(e) => return fail(data_or_config(&e), e),
    };
    if let Err(e) = emit_outputs(&table, &out) {
        return fail(DATA_ERROR, e);
    }
    for cell in &table.cells {
        if let Some(err) = &cell.failure {
            eprintln!("cell {:?} failed: {err}", cell.beta);
        }
    }
    if table.all_cells_failed() {
        return ExitCode::from(TRAINING_FAILURE);
    }
    let report = sweep_report(&table.rows);
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seed,
            parallel,
        } => run(config, out, seed, parallel),
        Command::SweepReport { input } => match read_results_csv(&input.join("results.csv")) {
            Ok(rows) => {
                let report = sweep_report(&rows);
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                ExitCode::SUCCESS
            }
            Err(e) => fail(DATA_ERROR, e),
        },
        Command::ConvertCheck { bundle } => match load_bundle(&bundle) {
            Ok(b) => {
                let stats = serde_json::json!({
                    "dataset": b.name,
                    "task": b.task,
                    "num_nodes": b.num_nodes,
                    "num_edges": b.undirected_edge_count(),
                    "feature_dim": b.feature_dim(),
                    "num_classes": b.num_classes,
                    "num_items": b.num_items(),
                });
                println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
                ExitCode::SUCCESS
            }
            Err(e) => fail(DATA_ERROR, e),
        },
    }
}
