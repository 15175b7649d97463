//! Bayesian GCN through Graph DropConnect.
//!
//! Every directed pair `(v, u)` of the [`NeighborIndex`], self-pairs
//! included, carries one keep mask of length `f_l` per layer; each entry is
//! kept with probability `1 − π_l`. Training minimizes the tempered free
//! energy divided by the number of training items,
//!
//! ```text
//! F / N = mean NLL + (β / N) · Σ_l KL_l
//! KL_l  = (1 − π_l) / (2 s²) · ‖W_l‖²  +  n_l · KL(Bern(π_l) ‖ Bern(π₀))
//! ```
//!
//! where `n_l` is the number of mask variables in layer `l` and
//! `π₀ = a / (a + b)` is the mean of the Beta(a, b) mask prior. With
//! learnable drop rates `π_l = sigmoid(φ_l)` and `φ` is trained with the ARM
//! estimator.
//!
//! Prediction averages softmax outputs over the `T` samples of one
//! [`MaskSet`]. A mask set stores only a seed; the masks for sample `t` and
//! layer `l` are regenerated from the substream `(seed, t, l)`, so every node
//! in a pass sees the same masks regardless of evaluation order or thread.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::PredictiveTable;
use crate::error::{Error, Result};
use crate::gcn::{
    accuracy, backprop_logits, cross_entropy, forward_pass, load_weights, read_json, save_weights,
    write_json, EpochRecord, ForwardCache, GcnConfig, GcnParams, LayerMask, TrainingLog,
};
use crate::graph::{GraphBundle, NeighborIndex, SplitSpec};
use crate::numerics::{
    adam_step, derive_seed, logit, sigmoid, softmax_rows, AdamConfig, AdamState, Matrix, RngState,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropRateParams {
    /// One drop probability per layer. The endpoints 0 and 1 are accepted
    /// for degenerate checks.
    Fixed(Vec<f64>),
    /// `π_l = sigmoid(logits[l])`, trained with ARM.
    Learnable { logits: Vec<f64> },
}

impl DropRateParams {
    pub fn uniform_fixed(num_layers: usize, rate: f64) -> Self {
        DropRateParams::Fixed(vec![rate; num_layers])
    }

    pub fn learnable_from_rate(num_layers: usize, rate: f64) -> Self {
        DropRateParams::Learnable {
            logits: vec![logit(rate); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        match self {
            DropRateParams::Fixed(p) => p.len(),
            DropRateParams::Learnable { logits } => logits.len(),
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, DropRateParams::Learnable { .. })
    }

    pub fn rates(&self) -> Vec<f64> {
        match self {
            DropRateParams::Fixed(p) => p.clone(),
            DropRateParams::Learnable { logits } => logits.iter().map(|&x| sigmoid(x)).collect(),
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.num_layers() != num_layers {
            return Err(Error::shape(
                "DropRateParams",
                format!("{} drop rates for {num_layers} layers", self.num_layers()),
            ));
        }
        let ok = match self {
            DropRateParams::Fixed(p) => p.iter().all(|x| (0.0..=1.0).contains(x)),
            DropRateParams::Learnable { logits } => logits.iter().all(|x| x.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid drop rates {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureConfig {
    pub beta: f64,
    /// Standard deviation `s` of the zero-mean Gaussian weight prior.
    pub weight_prior_scale: f64,
    pub mask_prior_a: f64,
    pub mask_prior_b: f64,
}

impl TemperatureConfig {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            weight_prior_scale: 1.0,
            mask_prior_a: 1.0,
            mask_prior_b: 1.0,
        }
    }

    /// Prior drop probability `a / (a + b)`.
    pub fn prior_drop_rate(&self) -> f64 {
        self.mask_prior_a / (self.mask_prior_a + self.mask_prior_b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta {} must be >= 0", self.beta)));
        }
        if !(self.weight_prior_scale > 0.0 && self.mask_prior_a > 0.0 && self.mask_prior_b > 0.0) {
            return Err(Error::InvalidArgument("prior parameters must be positive".into()));
        }
        Ok(())
    }
}

/// `KL(Bern(q) ‖ Bern(p))` with `0 · log 0 = 0`.
pub fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(q, p) + term(1.0 - q, 1.0 - p)
}

/// Weight part of one layer's KL: `(1 − π) / (2 s²) · ‖W‖²`.
pub fn weight_kl(weight: &Matrix, drop_rate: f64, prior_scale: f64) -> f64 {
    (1.0 - drop_rate) / (2.0 * prior_scale * prior_scale) * weight.squared_norm()
}

/// Mask variables per layer: pairs × input width.
pub fn mask_counts(config: &GcnConfig, index: &NeighborIndex) -> Vec<usize> {
    config.layer_dims[..config.num_layers()]
        .iter()
        .map(|&f| f * index.num_pairs())
        .collect()
}

/// Total KL over all layers.
pub fn kl_divergence(params: &GcnParams, drop_rates: &[f64], mask_counts: &[usize], temp: &TemperatureConfig) -> f64 {
    let p0 = temp.prior_drop_rate();
    params
        .weights
        .iter()
        .zip(drop_rates)
        .zip(mask_counts)
        .map(|((w, &pi), &n)| weight_kl(w, pi, temp.weight_prior_scale) + n as f64 * bernoulli_kl(pi, p0))
        .sum()
}

#[derive(Debug, Clone)]
pub struct FreeEnergy {
    /// `nll + kl_term`.
    pub value: f64,
    pub nll: f64,
    /// Unscaled KL.
    pub kl: f64,
    /// `(β / N) · kl`.
    pub kl_term: f64,
    /// Gradient of `kl_term` w.r.t. each weight matrix.
    pub weight_grads: Vec<Matrix>,
    /// Gradient of `kl_term` w.r.t. the drop-rate logits (learnable mode).
    pub logit_grads: Option<Vec<f64>>,
}

/// Adds the tempered KL to a mean NLL. `β = 0` contributes nothing to the
/// value or the gradients.
pub fn free_energy_loss(
    nll: f64,
    params: &GcnParams,
    drop: &DropRateParams,
    mask_counts: &[usize],
    temp: &TemperatureConfig,
    num_train: usize,
) -> Result<FreeEnergy> {
    temp.validate()?;
    drop.validate(params.weights.len())?;
    if mask_counts.len() != params.weights.len() {
        return Err(Error::shape("free_energy_loss", "mask counts do not match layers"));
    }
    let zero_grads = || params.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    let learnable = drop.is_learnable();
    if temp.beta == 0.0 {
        return Ok(FreeEnergy {
            value: nll,
            nll,
            kl: 0.0,
            kl_term: 0.0,
            weight_grads: zero_grads(),
            logit_grads: learnable.then(|| vec![0.0; params.weights.len()]),
        });
    }
    let rates = drop.rates();
    let kl = kl_divergence(params, &rates, mask_counts, temp);
    let scale = temp.beta / num_train.max(1) as f64;
    let s2 = temp.weight_prior_scale * temp.weight_prior_scale;
    let weight_grads = params
        .weights
        .iter()
        .zip(&rates)
        .map(|(w, &pi)| {
            let mut g = w.clone();
            g.scale(scale * (1.0 - pi) / s2);
            g
        })
        .collect();
    let logit_grads = learnable.then(|| {
        let logit_p0 = logit(temp.prior_drop_rate());
        params
            .weights
            .iter()
            .zip(&rates)
            .zip(mask_counts)
            .map(|((w, &pi), &n)| {
                let d_pi = -w.squared_norm() / (2.0 * s2) + n as f64 * (logit(pi) - logit_p0);
                scale * d_pi * pi * (1.0 - pi)
            })
            .collect()
    });
    let kl_term = scale * kl;
    Ok(FreeEnergy {
        value: nll + kl_term,
        nll,
        kl,
        kl_term,
        weight_grads,
        logit_grads,
    })
}

/// `T` mask samples, stored as a seed and regenerated on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    seed: u64,
    samples: usize,
    drop_rates: Vec<f64>,
    layer_widths: Vec<usize>,
    num_pairs: usize,
}

impl MaskSet {
    pub fn new(seed: u64, samples: usize, index: &NeighborIndex, layer_widths: &[usize], drop_rates: &[f64]) -> Result<Self> {
        if samples == 0 {
            return Err(Error::InvalidArgument("a mask set needs T >= 1".into()));
        }
        if layer_widths.len() != drop_rates.len() {
            return Err(Error::shape(
                "MaskSet",
                format!("{} widths for {} drop rates", layer_widths.len(), drop_rates.len()),
            ));
        }
        if let Some(p) = drop_rates.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("drop rate {p} outside [0, 1]")));
        }
        Ok(Self {
            seed,
            samples,
            drop_rates: drop_rates.to_vec(),
            layer_widths: layer_widths.to_vec(),
            num_pairs: index.num_pairs(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn drop_rates(&self) -> &[f64] {
        &self.drop_rates
    }

    /// Masks of sample `t`, one per layer.
    pub fn masks(&self, t: usize) -> Vec<LayerMask> {
        (0..self.layer_widths.len())
            .map(|l| {
                let mut rng = RngState::new(derive_seed(self.seed, &[t as u64, l as u64]));
                keep_mask(&mut rng, self.num_pairs, self.layer_widths[l], self.drop_rates[l])
            })
            .collect()
    }
}

fn keep_mask(rng: &mut RngState, num_pairs: usize, width: usize, drop_rate: f64) -> LayerMask {
    let keep = (0..num_pairs * width).map(|_| rng.uniform() >= drop_rate).collect();
    LayerMask::new(width, keep).expect("width is positive")
}

/// Draws a fresh mask-set seed from `rng`.
pub fn sample_masks(
    rng: &mut RngState,
    index: &NeighborIndex,
    config: &GcnConfig,
    drop_rates: &[f64],
    samples: usize,
) -> Result<MaskSet> {
    let widths = &config.layer_dims[..config.num_layers()];
    MaskSet::new(rng.next_u64(), samples, index, widths, drop_rates)
}

/// Forward pass with one sample's masks.
pub fn gdc_forward(
    config: &GcnConfig,
    params: &GcnParams,
    bundle: &GraphBundle,
    index: &NeighborIndex,
    masks: &[LayerMask],
) -> Result<ForwardCache> {
    forward_pass(config, params, bundle, index, Some(masks.to_vec()), None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianConfig {
    pub gcn: GcnConfig,
    pub drop: DropRateParams,
    pub temperature: TemperatureConfig,
    /// Mask samples per training step.
    pub train_samples: usize,
}

impl BayesianConfig {
    pub fn new(gcn: GcnConfig, drop: DropRateParams, beta: f64) -> Self {
        Self {
            gcn,
            drop,
            temperature: TemperatureConfig::new(beta),
            train_samples: 1,
        }
    }

    /// The network is trained without weight decay or dropout; the KL term
    /// and the masks take their place.
    fn network(&self) -> GcnConfig {
        GcnConfig {
            weight_decay: 0.0,
            dropout_rate: 0.0,
            ..self.gcn.clone()
        }
    }

    pub fn validate_for(&self, bundle: &GraphBundle) -> Result<()> {
        self.gcn.validate_for(bundle)?;
        self.drop.validate(self.gcn.num_layers())?;
        self.temperature.validate()?;
        if self.train_samples == 0 {
            return Err(Error::InvalidArgument("train_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GdcModel {
    pub config: BayesianConfig,
    pub params: GcnParams,
    /// Current drop rates (learned ones in ARM mode).
    pub drop: DropRateParams,
    pub log: TrainingLog,
}

impl GdcModel {
    pub fn network(&self) -> GcnConfig {
        self.config.network()
    }

    pub fn drop_rates(&self) -> Vec<f64> {
        self.drop.rates()
    }

    pub fn sample_masks(&self, rng: &mut RngState, index: &NeighborIndex, samples: usize) -> Result<MaskSet> {
        sample_masks(rng, index, &self.config.gcn, &self.drop_rates(), samples)
    }
}

/// Per-variable ARM estimate of `∇_φ E[loss(d)]`, where `d_j ~ Bern(sigmoid(φ_j))`
/// is a drop indicator. `loss` is evaluated at `d = 1[u > sigmoid(−φ)]` and at
/// `d = 1[u < sigmoid(φ)]`.
pub fn arm_estimate(logits: &[f64], uniforms: &[f64], loss: impl Fn(&[bool]) -> f64) -> Vec<f64> {
    assert_eq!(logits.len(), uniforms.len(), "one uniform per logit");
    let first: Vec<bool> = logits.iter().zip(uniforms).map(|(&phi, &u)| u > sigmoid(-phi)).collect();
    let second: Vec<bool> = logits.iter().zip(uniforms).map(|(&phi, &u)| u < sigmoid(phi)).collect();
    let diff = loss(&first) - loss(&second);
    uniforms.iter().map(|u| diff * (u - 0.5)).collect()
}

struct ArmSample {
    grad: Vec<f64>,
    first_cache: ForwardCache,
    first_loss: f64,
    first_d_logits: Matrix,
}

fn arm_sample(
    network: &GcnConfig,
    params: &GcnParams,
    phi: &[f64],
    bundle: &GraphBundle,
    index: &NeighborIndex,
    items: &[usize],
    rng: &mut RngState,
) -> Result<ArmSample> {
    let mut first = Vec::with_capacity(phi.len());
    let mut second = Vec::with_capacity(phi.len());
    let mut centered = Vec::with_capacity(phi.len());
    for (l, &p) in phi.iter().enumerate() {
        let width = network.layer_dims[l];
        let n = width * index.num_pairs();
        let (lo, hi) = (sigmoid(-p), sigmoid(p));
        let mut keep1 = Vec::with_capacity(n);
        let mut keep2 = Vec::with_capacity(n);
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.uniform();
            keep1.push(u <= lo);
            keep2.push(u >= hi);
            sum += u - 0.5;
        }
        first.push(LayerMask::new(width, keep1)?);
        second.push(LayerMask::new(width, keep2)?);
        centered.push(sum);
    }
    let labels = bundle.item_labels();
    let first_cache = forward_pass(network, params, bundle, index, Some(first), None)?;
    let (first_loss, first_d_logits) = cross_entropy(first_cache.logits(), labels, items)?;
    let second_cache = forward_pass(network, params, bundle, index, Some(second), None)?;
    let (second_loss, _) = cross_entropy(second_cache.logits(), labels, items)?;
    let diff = first_loss - second_loss;
    Ok(ArmSample {
        grad: centered.iter().map(|c| diff * c).collect(),
        first_cache,
        first_loss,
        first_d_logits,
    })
}

/// One ARM estimate of the gradient of the mean NLL over `items` w.r.t. the
/// per-layer drop-rate logits.
pub fn arm_drop_rate_gradient(
    model: &GdcModel,
    bundle: &GraphBundle,
    index: &NeighborIndex,
    items: &[usize],
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let DropRateParams::Learnable { logits } = &model.drop else {
        return Err(Error::FixedRateMode);
    };
    let network = model.network();
    Ok(arm_sample(&network, &model.params, logits, bundle, index, items, rng)?.grad)
}

fn add_into(acc: &mut Option<Vec<Matrix>>, grads: Vec<Matrix>) -> Result<()> {
    match acc {
        None => *acc = Some(grads),
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.add_scaled(g, 1.0)?;
            }
        }
    }
    Ok(())
}

/// Minimizes the tempered free energy on `split.train`.
///
/// Weights are initialized exactly like the frequentist trainer from the
/// same `rng`, and the step-`e` masks come from the substream `(0xA5, e, s)`.
/// With `β = 0` and all drop rates 0 the weight trajectory is identical to
/// frequentist training without weight decay or dropout.
pub fn train_bayesian(
    bundle: &GraphBundle,
    split: &SplitSpec,
    config: &BayesianConfig,
    rng: &mut RngState,
    epochs: usize,
    learning_rate: f64,
) -> Result<GdcModel> {
    config.validate_for(bundle)?;
    let network = config.network();
    let index = NeighborIndex::from_bundle(bundle);
    let counts = mask_counts(&network, &index);
    let labels = bundle.item_labels();
    let mut params = GcnParams::init(&network, rng);
    let mut drop = config.drop.clone();
    let adam_config = AdamConfig::with_learning_rate(learning_rate);
    let mut adam = AdamState::new(adam_config, &params.weights);
    let mut phi_adam = match &drop {
        DropRateParams::Learnable { logits } => {
            Some(AdamState::new(adam_config, &[Matrix::zeros(1, logits.len())]))
        }
        DropRateParams::Fixed(_) => None,
    };
    let samples = config.train_samples;
    let mut log = TrainingLog::default();
    for epoch in 0..epochs {
        let mut weight_grads: Option<Vec<Matrix>> = None;
        let mut phi_grad = vec![0.0; network.num_layers()];
        let mut nll = 0.0;
        let mut train_accuracy = 0.0;
        for s in 0..samples {
            let mut mask_rng = rng.substream(&[0xA5, epoch as u64, s as u64]);
            let (cache, loss, d_logits) = match &drop {
                DropRateParams::Fixed(rates) => {
                    let masks: Vec<LayerMask> = rates
                        .iter()
                        .enumerate()
                        .map(|(l, &p)| keep_mask(&mut mask_rng, index.num_pairs(), network.layer_dims[l], p))
                        .collect();
                    let cache = forward_pass(&network, &params, bundle, &index, Some(masks), None)?;
                    let (loss, d_logits) = cross_entropy(cache.logits(), labels, &split.train)?;
                    (cache, loss, d_logits)
                }
                DropRateParams::Learnable { logits } => {
                    let arm = arm_sample(&network, &params, logits, bundle, &index, &split.train, &mut mask_rng)?;
                    phi_grad.iter_mut().zip(&arm.grad).for_each(|(a, g)| *a += g);
                    (arm.first_cache, arm.first_loss, arm.first_d_logits)
                }
            };
            let grads = backprop_logits(&network, &params, bundle, &index, &cache, &d_logits)?;
            add_into(&mut weight_grads, grads)?;
            nll += loss;
            train_accuracy += accuracy(cache.logits(), labels, &split.train);
        }
        let mut weight_grads = weight_grads.expect("at least one sample");
        if samples > 1 {
            let inv = 1.0 / samples as f64;
            weight_grads.iter_mut().for_each(|g| g.scale(inv));
            phi_grad.iter_mut().for_each(|g| *g *= inv);
            nll *= inv;
            train_accuracy *= inv;
        }
        let mut loss = nll;
        if config.temperature.beta > 0.0 {
            let fe = free_energy_loss(nll, &params, &drop, &counts, &config.temperature, split.train.len())?;
            for (g, k) in weight_grads.iter_mut().zip(&fe.weight_grads) {
                g.add_scaled(k, 1.0)?;
            }
            if let Some(k) = &fe.logit_grads {
                phi_grad.iter_mut().zip(k).for_each(|(a, g)| *a += g);
            }
            loss = fe.value;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss,
            train_accuracy,
        });
        adam_step(&mut params.weights, &weight_grads, &mut adam)?;
        if let (DropRateParams::Learnable { logits }, Some(state)) = (&mut drop, phi_adam.as_mut()) {
            let mut phi = [Matrix::new(1, logits.len(), logits.clone())?];
            let grad = [Matrix::new(1, phi_grad.len(), phi_grad)?];
            adam_step(&mut phi, &grad, state)?;
            logits.copy_from_slice(phi[0].data());
        }
        if params.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
    }
    Ok(GdcModel {
        config: config.clone(),
        params,
        drop,
        log,
    })
}

/// Averages softmax outputs over every sample of `masks`. All items are
/// computed in the same passes. Samples run in parallel and are combined
/// in sample order with a running mean.
pub fn mc_predict(model: &GdcModel, bundle: &GraphBundle, index: &NeighborIndex, masks: &MaskSet) -> Result<PredictiveTable> {
    let network = model.network();
    let widths = &network.layer_dims[..network.num_layers()];
    if masks.layer_widths != widths || masks.num_pairs != index.num_pairs() {
        return Err(Error::shape(
            "mc_predict",
            "mask set was drawn for a different graph or architecture",
        ));
    }
    let per_sample = (0..masks.samples())
        .into_par_iter()
        .map(|t| {
            let cache = forward_pass(&network, &model.params, bundle, index, Some(masks.masks(t)), None)?;
            Ok(softmax_rows(cache.logits()))
        })
        .collect::<Result<Vec<Matrix>>>()?;
    let mut iter = per_sample.into_iter();
    let mut mean = iter.next().expect("T >= 1");
    for (k, probs) in iter.enumerate() {
        let n = (k + 2) as f64;
        for (m, p) in mean.data_mut().iter_mut().zip(probs.data()) {
            *m += (p - *m) / n;
        }
    }
    PredictiveTable::new(mean, bundle.item_labels().to_vec())
}

#[derive(Debug, Serialize, Deserialize)]
struct BayesianMeta {
    model: String,
    config: BayesianConfig,
    drop: DropRateParams,
    drop_rates: Vec<f64>,
}

/// Checkpoint in the frequentist layout, with the Bayesian configuration,
/// the temperature and the current drop rates in `meta.json`.
pub fn save_bayesian_checkpoint(dir: impl AsRef<Path>, model: &GdcModel) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = BayesianMeta {
        model: "bayesian".into(),
        config: model.config.clone(),
        drop: model.drop.clone(),
        drop_rates: model.drop_rates(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    save_weights(dir, &model.params)
}

pub fn load_bayesian_checkpoint(dir: impl AsRef<Path>) -> Result<GdcModel> {
    let dir = dir.as_ref();
    let meta: BayesianMeta = read_json(&dir.join("meta.json"))?;
    if meta.model != "bayesian" {
        return Err(Error::InvalidArgument(format!(
            "{}: checkpoint model is {:?}",
            dir.display(),
            meta.model
        )));
    }
    let params = load_weights(dir, &meta.config.network())?;
    Ok(GdcModel {
        config: meta.config,
        params,
        drop: meta.drop,
        log: TrainingLog::default(),
    })
}
