//! Split conformal prediction on Bayesian graph convolutional networks
//! trained with tempered posteriors.
//!
//! The pipeline: a [`gcn`] network trained either with plain cross-entropy
//! or, through [`gdc`], as a Graph DropConnect model minimizing a
//! β-tempered free energy; Monte Carlo predictions over one shared
//! [`gdc::MaskSet`]; [`conformal`] prediction sets from the negative
//! log-probability score; and [`metrics`] for coverage, set size and
//! calibration. [`experiments`] ties these together into repeated-split
//! temperature sweeps.

pub mod conformal;
pub mod error;
pub mod experiments;
pub mod gcn;
pub mod gdc;
pub mod graph;
pub mod metrics;
pub mod numerics;

pub use conformal::{
    build_prediction_set, conformal_quantile, nll_score, run_scp, ConformalConfig, ConformalResult,
    PredictionSet, PredictiveTable,
};
pub use error::{BundleError, Error, Result};
pub use experiments::{
    emit_outputs, run_experiment, sweep_report, DatasetSpec, ExperimentConfig, ModelKind, ResultsTable,
    SweepReport, TrialRow,
};
pub use gcn::{gcn_backward, gcn_forward, train_frequentist, GcnConfig, GcnParams, Readout, TrainedGcn};
pub use gdc::{
    arm_drop_rate_gradient, free_energy_loss, gdc_forward, mc_predict, sample_masks, train_bayesian,
    BayesianConfig, DropRateParams, GdcModel, MaskSet, TemperatureConfig,
};
pub use graph::{
    generate_sbm, load_bundle, resample_split, save_bundle, GraphBundle, NeighborIndex, SbmSpec, SplitSizes,
    SplitSpec, Task,
};
pub use metrics::{ece, mce, reliability, MetricsReport, ReliabilityDiagram};
pub use numerics::{Matrix, RngState};
