//! Temperature sweeps with repeated conformal trials.
//!
//! For every β cell the model is trained once on a fixed training split.
//! Each trial then re-partitions the remaining items into calibration and
//! test, draws a fresh shared mask set, predicts every item in one pass and
//! runs split conformal prediction. Trial `t` uses the seed
//! `derive_seed(seed, [4, t])`, so the same calibration/test partitions are
//! used in every cell and any trial can be replayed on its own.
//!
//! Output files written by [`emit_outputs`]:
//!
//! * `results.csv`: one row per (cell, trial)
//! * `summary.json`: per-cell mean and standard deviation plus the β selection
//! * `boxplot.json`: quartiles and whiskers of coverage and inefficiency
//! * `reliability_<beta>.csv`: pooled test-set reliability bins per cell
//! * `failures.json`: cells that could not be trained or evaluated
//! * `checkpoints/<beta>/`: trained weights

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{run_scp, ConformalConfig, PredictiveTable};
use crate::error::{Error, Result};
use crate::gcn::{save_checkpoint, train_frequentist, write_json, GcnConfig, Readout, TrainedGcn};
use crate::gdc::{mc_predict, save_bayesian_checkpoint, train_bayesian, BayesianConfig, DropRateParams, GdcModel, TemperatureConfig};
use crate::graph::{
    generate_graph_set, generate_sbm, load_bundle, resample_calibration_test, resample_split, GraphBundle,
    GraphSetSpec, NeighborIndex, SbmSpec, SplitSizes, SplitSpec, Task,
};
use crate::metrics::{evaluate, ReliabilityDiagram};
use crate::numerics::{derive_seed, RngState};

const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_TRIAL: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Bundle directory; relative paths resolve against the config file.
    Bundle { path: PathBuf },
    Sbm(SbmSpec),
    GraphSet(GraphSetSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Frequentist,
    Bayesian,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Frequentist => "frequentist",
            ModelKind::Bayesian => "bayesian",
        }
    }
}

fn default_alpha() -> f64 {
    0.1
}
fn default_mc_samples() -> usize {
    20
}
fn default_lr() -> f64 {
    0.005
}
fn default_hidden() -> Vec<usize> {
    vec![16]
}
fn default_drop_rate() -> f64 {
    0.5
}
fn default_one() -> usize {
    1
}
fn default_bins() -> usize {
    crate::metrics::DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelKind,
    #[serde(default)]
    pub beta_grid: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// MC samples `T` per prediction pass.
    #[serde(default = "default_mc_samples", alias = "T")]
    pub mc_samples: usize,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Hidden-activation dropout of the frequentist model.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Initial drop rate `π` of every GDC layer.
    #[serde(default = "default_drop_rate")]
    pub drop_rate: f64,
    /// Learn drop rates with ARM.
    #[serde(default)]
    pub learn_drop_rates: bool,
    #[serde(default = "default_one")]
    pub train_samples: usize,
    /// Defaults to `none` for node tasks and `sum` for graph tasks.
    #[serde(default)]
    pub readout: Option<Readout>,
    pub n_trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub split: SplitSizes,
    /// Redraw the training split (and retrain) in every trial.
    #[serde(default)]
    pub resample_train: bool,
    #[serde(default)]
    pub force_nonempty: bool,
    #[serde(default = "default_bins")]
    pub reliability_bins: usize,
}

impl ExperimentConfig {
    /// Reads a JSON config; a relative bundle path is resolved against the
    /// file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if let DatasetSpec::Bundle { path: bundle } = &mut config.dataset {
            if bundle.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *bundle = base.join(&*bundle);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if self.n_trials == 0 {
            return bad("n_trials must be >= 1".into());
        }
        if self.mc_samples == 0 || self.train_samples == 0 {
            return bad("mc_samples and train_samples must be >= 1".into());
        }
        if self.split.test == 0 {
            return bad("the test split must be nonempty".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.dropout) {
            return bad("lr must be positive, weight_decay >= 0 and dropout in [0, 1)".into());
        }
        if self.reliability_bins == 0 {
            return bad("reliability_bins must be >= 1".into());
        }
        if self.model == ModelKind::Bayesian {
            if self.beta_grid.is_empty() {
                return bad("a bayesian run needs a nonempty beta_grid".into());
            }
            if let Some(b) = self.beta_grid.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
                return bad(format!("beta {b} must be finite and >= 0"));
            }
            let rate_ok = if self.learn_drop_rates {
                self.drop_rate > 0.0 && self.drop_rate < 1.0
            } else {
                (0.0..=1.0).contains(&self.drop_rate)
            };
            if !rate_ok {
                return bad(format!("drop_rate {} out of range", self.drop_rate));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Option<f64>> {
        match self.model {
            ModelKind::Frequentist => vec![None],
            ModelKind::Bayesian => self.beta_grid.iter().map(|&b| Some(b)).collect(),
        }
    }

    pub fn gcn_config(&self, bundle: &GraphBundle) -> GcnConfig {
        let mut gcn = GcnConfig::node_classifier(bundle.feature_dim(), &self.hidden, bundle.num_classes);
        gcn.readout = self.readout.unwrap_or(match bundle.task {
            Task::NodeClassification => Readout::None,
            Task::GraphClassification => Readout::Sum,
        });
        gcn.weight_decay = self.weight_decay;
        gcn.dropout_rate = self.dropout;
        gcn
    }
}

/// Loads or generates the configured dataset.
pub fn load_dataset(config: &ExperimentConfig) -> Result<GraphBundle> {
    let mut rng = RngState::new(derive_seed(config.seed, &[STREAM_DATA]));
    match &config.dataset {
        DatasetSpec::Bundle { path } => load_bundle(path),
        DatasetSpec::Sbm(spec) => generate_sbm(&mut rng, spec),
        DatasetSpec::GraphSet(spec) => generate_graph_set(&mut rng, spec),
    }
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Frequentist(TrainedGcn),
    Bayesian(GdcModel),
}

impl TrainedModel {
    pub fn final_loss(&self) -> Option<f64> {
        match self {
            TrainedModel::Frequentist(m) => m.log.final_loss(),
            TrainedModel::Bayesian(m) => m.log.final_loss(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            TrainedModel::Frequentist(m) => save_checkpoint(dir, &m.config, &m.params),
            TrainedModel::Bayesian(m) => save_bayesian_checkpoint(dir, m),
        }
    }

    /// Predictive table for all items; Bayesian models draw their mask set
    /// from `rng`.
    pub fn predict(&self, bundle: &GraphBundle, index: &NeighborIndex, rng: &mut RngState, samples: usize) -> Result<PredictiveTable> {
        match self {
            TrainedModel::Frequentist(m) => PredictiveTable::new(m.predict(bundle, index)?, bundle.item_labels().to_vec()),
            TrainedModel::Bayesian(m) => {
                let masks = m.sample_masks(rng, index, samples)?;
                mc_predict(m, bundle, index, &masks)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub dataset: String,
    pub model: String,
    pub beta: Option<f64>,
    pub trial: usize,
    pub coverage: f64,
    pub inefficiency: f64,
    pub empty_set_rate: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub combined: Option<f64>,
    pub threshold: f64,
    pub forced: usize,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub beta: Option<f64>,
    pub failure: Option<String>,
    /// Test-set reliability pooled over trials.
    pub reliability: Option<ReliabilityDiagram>,
    /// The trained model (trial 0's when training is resampled).
    pub model: Option<TrainedModel>,
}

#[derive(Debug, Clone)]
pub struct ResultsTable {
    pub dataset: String,
    pub model: ModelKind,
    pub rows: Vec<TrialRow>,
    pub cells: Vec<CellOutcome>,
}

impl ResultsTable {
    pub fn all_cells_failed(&self) -> bool {
        !self.cells.is_empty() && self.cells.iter().all(|c| c.failure.is_some())
    }
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    bundle: &'a GraphBundle,
    index: &'a NeighborIndex,
    gcn: GcnConfig,
    train: Vec<usize>,
}

impl Context<'_> {
    fn train(&self, beta: Option<f64>, train: &[usize], seed: u64) -> Result<TrainedModel> {
        let split = SplitSpec {
            train: train.to_vec(),
            calibration: vec![],
            test: vec![],
            seed,
        };
        let mut rng = RngState::new(seed);
        let c = self.config;
        match beta {
            None => Ok(TrainedModel::Frequentist(train_frequentist(
                self.bundle, &split, &self.gcn, &mut rng, c.epochs, c.lr,
            )?)),
            Some(beta) => {
                let layers = self.gcn.num_layers();
                let drop = if c.learn_drop_rates {
                    DropRateParams::learnable_from_rate(layers, c.drop_rate)
                } else {
                    DropRateParams::uniform_fixed(layers, c.drop_rate)
                };
                let bayes = BayesianConfig {
                    gcn: self.gcn.clone(),
                    drop,
                    temperature: TemperatureConfig::new(beta),
                    train_samples: c.train_samples,
                };
                Ok(TrainedModel::Bayesian(train_bayesian(
                    self.bundle, &split, &bayes, &mut rng, c.epochs, c.lr,
                )?))
            }
        }
    }

    fn trial(&self, beta: Option<f64>, model: Option<&TrainedModel>, t: usize) -> Result<(TrialRow, ReliabilityDiagram, Option<TrainedModel>)> {
        let c = self.config;
        let mut rng = RngState::new(derive_seed(c.seed, &[STREAM_TRIAL, t as u64]));
        let n = self.bundle.num_items();
        let (split, retrained) = if c.resample_train {
            let split = resample_split(&mut rng, n, c.split)?;
            let seed = derive_seed(c.seed, &[STREAM_TRAIN, t as u64]);
            let m = self.train(beta, &split.train, seed)?;
            (split, Some(m))
        } else {
            (resample_calibration_test(&mut rng, n, &self.train, c.split.calibration, c.split.test)?, None)
        };
        let model = retrained.as_ref().or(model).expect("a model is available");
        let table = model.predict(self.bundle, self.index, &mut rng, c.mc_samples)?;
        let cp = ConformalConfig {
            alpha: c.alpha,
            force_nonempty: c.force_nonempty,
        };
        let result = run_scp(&table, &split, &cp)?;
        let (report, diagram) = evaluate(&table.probs, &table.labels, &split.test, &result, c.reliability_bins)?;
        let row = TrialRow {
            dataset: self.bundle.name.clone(),
            model: c.model.as_str().into(),
            beta,
            trial: t,
            coverage: report.coverage,
            inefficiency: report.inefficiency,
            empty_set_rate: report.empty_set_rate,
            accuracy: report.accuracy,
            ece: report.ece,
            mce: report.mce,
            combined: report.combined,
            threshold: report.threshold,
            forced: report.forced,
        };
        Ok((row, diagram, retrained))
    }

    fn cell(&self, beta: Option<f64>) -> (CellOutcome, Vec<TrialRow>) {
        let failed = |e: Error| {
            (
                CellOutcome {
                    beta,
                    failure: Some(e.to_string()),
                    reliability: None,
                    model: None,
                },
                Vec::new(),
            )
        };
        let c = self.config;
        let model = if c.resample_train {
            None
        } else {
            match self.train(beta, &self.train, derive_seed(c.seed, &[STREAM_TRAIN])) {
                Ok(m) => Some(m),
                Err(e) => return failed(e),
            }
        };
        let trials = (0..c.n_trials)
            .into_par_iter()
            .map(|t| self.trial(beta, model.as_ref(), t))
            .collect::<Result<Vec<_>>>();
        let trials = match trials {
            Ok(t) => t,
            Err(e) => return failed(e),
        };
        let mut pooled = ReliabilityDiagram::empty(c.reliability_bins).expect("validated bin count");
        let mut rows = Vec::with_capacity(trials.len());
        let mut model = model;
        for (row, diagram, retrained) in trials {
            pooled.merge(&diagram).expect("same bin count");
            if model.is_none() {
                model = retrained;
            }
            rows.push(row);
        }
        let outcome = CellOutcome {
            beta,
            failure: None,
            reliability: Some(pooled),
            model,
        };
        (outcome, rows)
    }
}

/// Runs every cell of the sweep. A cell that fails to train or evaluate is
/// recorded in [`CellOutcome::failure`] and the others still run; dataset and
/// configuration problems abort the whole run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsTable> {
    config.validate()?;
    let bundle = load_dataset(config)?;
    run_on_bundle(config, &bundle)
}

/// [`run_experiment`] on an already loaded dataset.
pub fn run_on_bundle(config: &ExperimentConfig, bundle: &GraphBundle) -> Result<ResultsTable> {
    config.validate()?;
    let gcn = config.gcn_config(bundle);
    gcn.validate_for(bundle)?;
    let index = NeighborIndex::from_bundle(bundle);
    let n = bundle.num_items();
    let train = match (&bundle.train_index, config.resample_train) {
        (Some(train), false) => train.clone(),
        _ => {
            let mut rng = RngState::new(derive_seed(config.seed, &[STREAM_SPLIT]));
            resample_split(&mut rng, n, config.split)?.train
        }
    };
    let needed = train.len() + config.split.calibration + config.split.test;
    if needed > n {
        return Err(Error::InvalidArgument(format!(
            "split needs {needed} items but the dataset has {n}"
        )));
    }
    let ctx = Context {
        config,
        bundle,
        index: &index,
        gcn,
        train,
    };
    let results: Vec<(CellOutcome, Vec<TrialRow>)> = config
        .cells()
        .into_par_iter()
        .map(|beta| ctx.cell(beta))
        .collect();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (cell, r) in results {
        rows.extend(r);
        cells.push(cell);
    }
    Ok(ResultsTable {
        dataset: bundle.name.clone(),
        model: config.model,
        rows,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub beta: Option<f64>,
    pub trials: usize,
    pub coverage: MeanStd,
    pub inefficiency: MeanStd,
    pub empty_set_rate: MeanStd,
    pub accuracy: MeanStd,
    pub ece: MeanStd,
    pub mce: MeanStd,
    /// Over trials where the combined measure is defined.
    pub combined: Option<MeanStd>,
    /// Missing when some threshold was infinite.
    pub threshold: Option<MeanStd>,
    pub forced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub beta: Option<f64>,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellSummary>,
    /// Cell with the smallest mean inefficiency (ties: smallest β). Only set
    /// when the table has at least two β values.
    pub best_beta: Option<f64>,
    pub best_inefficiency: Option<f64>,
    /// Cells ordered by mean combined measure, smallest first.
    pub combined_ranking: Vec<RankEntry>,
}

fn same_beta(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x.to_bits() == y.to_bits(),
        (None, None) => true,
        _ => false,
    }
}

/// Per-cell aggregates in order of first appearance, plus the β selection.
pub fn sweep_report(rows: &[TrialRow]) -> SweepReport {
    let mut groups: Vec<(Option<f64>, Vec<&TrialRow>)> = Vec::new();
    for row in rows {
        match groups.iter_mut().find(|(b, _)| same_beta(*b, row.beta)) {
            Some((_, g)) => g.push(row),
            None => groups.push((row.beta, vec![row])),
        }
    }
    let cells: Vec<CellSummary> = groups
        .iter()
        .map(|(beta, g)| {
            let col = |f: fn(&TrialRow) -> f64| MeanStd::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("nonempty group");
            let combined: Vec<f64> = g.iter().filter_map(|r| r.combined).collect();
            let thresholds: Vec<f64> = g.iter().map(|r| r.threshold).collect();
            CellSummary {
                beta: *beta,
                trials: g.len(),
                coverage: col(|r| r.coverage),
                inefficiency: col(|r| r.inefficiency),
                empty_set_rate: col(|r| r.empty_set_rate),
                accuracy: col(|r| r.accuracy),
                ece: col(|r| r.ece),
                mce: col(|r| r.mce),
                combined: MeanStd::of(&combined),
                threshold: if thresholds.iter().all(|t| t.is_finite()) { MeanStd::of(&thresholds) } else { None },
                forced: g.iter().map(|r| r.forced).sum(),
            }
        })
        .collect();

    let betas: Vec<&CellSummary> = cells.iter().filter(|c| c.beta.is_some()).collect();
    let (best_beta, best_inefficiency) = if betas.len() >= 2 {
        let best = betas
            .iter()
            .min_by(|a, b| {
                a.inefficiency
                    .mean
                    .total_cmp(&b.inefficiency.mean)
                    .then(a.beta.unwrap().total_cmp(&b.beta.unwrap()))
            })
            .expect("at least two cells");
        (best.beta, Some(best.inefficiency.mean))
    } else {
        (None, None)
    };

    let mut combined_ranking: Vec<RankEntry> = cells
        .iter()
        .filter(|c| c.accuracy.mean > 0.0)
        .filter_map(|c| {
            c.combined.map(|m| RankEntry {
                beta: c.beta,
                combined: m.mean,
            })
        })
        .collect();
    combined_ranking.sort_by(|a, b| {
        a.combined
            .total_cmp(&b.combined)
            .then(a.beta.unwrap_or(f64::NEG_INFINITY).total_cmp(&b.beta.unwrap_or(f64::NEG_INFINITY)))
    });

    SweepReport {
        cells,
        best_beta,
        best_inefficiency,
        combined_ranking,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Most extreme values within 1.5 IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&s, 0.25);
        let q3 = quantile_sorted(&s, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        Some(Self {
            min: s[0],
            q1,
            median: quantile_sorted(&s, 0.5),
            q3,
            max: s[s.len() - 1],
            whisker_low: *s.iter().find(|&&x| x >= lo_fence).expect("q1 is inside"),
            whisker_high: *s.iter().rev().find(|&&x| x <= hi_fence).expect("q3 is inside"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotCell {
    pub beta: Option<f64>,
    pub coverage: BoxStats,
    pub inefficiency: BoxStats,
}

pub fn boxplot_data(rows: &[TrialRow]) -> Vec<BoxplotCell> {
    let mut betas: Vec<Option<f64>> = Vec::new();
    for r in rows {
        if !betas.iter().any(|b| same_beta(*b, r.beta)) {
            betas.push(r.beta);
        }
    }
    betas
        .into_iter()
        .map(|beta| {
            let g: Vec<&TrialRow> = rows.iter().filter(|r| same_beta(r.beta, beta)).collect();
            let cov: Vec<f64> = g.iter().map(|r| r.coverage).collect();
            let ineff: Vec<f64> = g.iter().map(|r| r.inefficiency).collect();
            BoxplotCell {
                beta,
                coverage: BoxStats::of(&cov).expect("nonempty"),
                inefficiency: BoxStats::of(&ineff).expect("nonempty"),
            }
        })
        .collect()
}

pub const RESULTS_HEADER: [&str; 13] = [
    "dataset",
    "model",
    "beta",
    "trial",
    "coverage",
    "inefficiency",
    "empty_set_rate",
    "accuracy",
    "ece",
    "mce",
    "combined",
    "threshold",
    "forced",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_results_csv(rows: &[TrialRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(RESULTS_HEADER).map_err(csv_error(path))?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.model.clone(),
            opt(r.beta),
            r.trial.to_string(),
            r.coverage.to_string(),
            r.inefficiency.to_string(),
            r.empty_set_rate.to_string(),
            r.accuracy.to_string(),
            r.ece.to_string(),
            r.mce.to_string(),
            opt(r.combined),
            r.threshold.to_string(),
            r.forced.to_string(),
        ])
        .map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<TrialRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let header = r.headers().map_err(csv_error(path))?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::InvalidArgument(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error(path))?;
        let line = i + 2;
        let bad = |field: &str| Error::InvalidArgument(format!("{}:{line}: bad {field}", path.display()));
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(RESULTS_HEADER[k]));
        let maybe = |k: usize| -> Result<Option<f64>> {
            if rec[k].is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        rows.push(TrialRow {
            dataset: rec[0].to_string(),
            model: rec[1].to_string(),
            beta: maybe(2)?,
            trial: rec[3].parse().map_err(|_| bad("trial"))?,
            coverage: num(4)?,
            inefficiency: num(5)?,
            empty_set_rate: num(6)?,
            accuracy: num(7)?,
            ece: num(8)?,
            mce: num(9)?,
            combined: maybe(10)?,
            threshold: num(11)?,
            forced: rec[12].parse().map_err(|_| bad("forced"))?,
        });
    }
    Ok(rows)
}

/// File-name label of a cell: the β value, or `frequentist`.
pub fn cell_label(beta: Option<f64>) -> String {
    beta.map(|b| b.to_string()).unwrap_or_else(|| "frequentist".into())
}

pub fn write_reliability_csv(diagram: &ReliabilityDiagram, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["bin", "lower", "upper", "count", "accuracy", "confidence"])
        .map_err(csv_error(path))?;
    let m = diagram.num_bins() as f64;
    for (k, b) in diagram.bins().iter().enumerate() {
        w.write_record([
            (k + 1).to_string(),
            (k as f64 / m).to_string(),
            ((k + 1) as f64 / m).to_string(),
            b.count.to_string(),
            b.accuracy.to_string(),
            b.confidence.to_string(),
        ])
        .map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub beta: Option<f64>,
    pub error: String,
}

/// Writes every output file into `out` (created if missing).
pub fn emit_outputs(table: &ResultsTable, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_results_csv(&table.rows, &out.join("results.csv"))?;
    write_json(&out.join("summary.json"), &sweep_report(&table.rows))?;
    write_json(&out.join("boxplot.json"), &boxplot_data(&table.rows))?;
    let failures: Vec<CellFailure> = table
        .cells
        .iter()
        .filter_map(|c| {
            c.failure.as_ref().map(|e| CellFailure {
                beta: c.beta,
                error: e.clone(),
            })
        })
        .collect();
    write_json(&out.join("failures.json"), &failures)?;
    for cell in &table.cells {
        let label = cell_label(cell.beta);
        if let Some(d) = &cell.reliability {
            write_reliability_csv(d, &out.join(format!("reliability_{label}.csv")))?;
        }
        if let Some(m) = &cell.model {
            m.save(&out.join("checkpoints").join(&label))?;
        }
    }
    Ok(())
}
