//! Graph convolutional network with mean aggregation over `N(v) ∪ {v}`.
//!
//! Layer rule, for node `v` with `c_v = |N(v)| + 1`:
//!
//! ```text
//! h_v' = σ( (1/c_v) · Σ_{u ∈ N(v) ∪ {v}} (z_{v,u} ⊙ h_u) · W )
//! ```
//!
//! `z_{v,u}` is an optional per-pair, per-feature keep mask ([`LayerMask`]);
//! the deterministic network is the all-ones case and takes the same
//! arithmetic path, so masked and unmasked passes agree bit for bit when
//! every mask entry is kept. `σ` is ReLU on hidden layers and the identity on
//! the last one. For graph-classification, last-layer node outputs are pooled
//! per graph by the configured [`Readout`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBundle, NeighborIndex, SplitSpec, Task};
use crate::numerics::{
    adam_step, glorot_init, log_sum_exp, softmax_rows, AdamConfig, AdamState, Matrix, RngState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    None,
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    /// `[f_0, f_1, ..., f_L]`, with `f_L` the number of classes.
    pub layer_dims: Vec<usize>,
    pub readout: Readout,
    pub weight_decay: f64,
    /// Inverted dropout on hidden activations during frequentist training.
    pub dropout_rate: f64,
}

impl GcnConfig {
    /// Node-classification network with the given hidden widths.
    pub fn node_classifier(feature_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layer_dims = vec![feature_dim];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(num_classes);
        Self {
            layer_dims,
            readout: Readout::None,
            weight_decay: 0.0,
            dropout_rate: 0.0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn validate_for(&self, bundle: &GraphBundle) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidArgument("a GCN needs at least one layer".into()));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.layer_dims[0] != bundle.feature_dim() {
            return Err(Error::shape(
                "gcn",
                format!(
                    "input width {} but features have {} columns",
                    self.layer_dims[0],
                    bundle.feature_dim()
                ),
            ));
        }
        if self.layer_dims[self.num_layers()] != bundle.num_classes {
            return Err(Error::shape(
                "gcn",
                format!(
                    "output width {} but bundle has {} classes",
                    self.layer_dims[self.num_layers()],
                    bundle.num_classes
                ),
            ));
        }
        let node_task = bundle.task == Task::NodeClassification;
        if node_task != (self.readout == Readout::None) {
            return Err(Error::InvalidArgument(
                "readout must be none exactly for node classification".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "dropout {} / weight decay {} out of range",
                self.dropout_rate, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub weights: Vec<Matrix>,
}

impl GcnParams {
    /// Glorot-uniform weights, drawn layer by layer from `rng`.
    pub fn init(config: &GcnConfig, rng: &mut RngState) -> Self {
        let weights = config
            .layer_dims
            .windows(2)
            .map(|w| glorot_init(rng, w[0], w[1]))
            .collect();
        Self { weights }
    }

    pub fn check(&self, config: &GcnConfig) -> Result<()> {
        if self.weights.len() != config.num_layers() {
            return Err(Error::shape(
                "GcnParams",
                format!("{} weights for {} layers", self.weights.len(), config.num_layers()),
            ));
        }
        for (l, (w, dims)) in self.weights.iter().zip(config.layer_dims.windows(2)).enumerate() {
            if w.shape() != (dims[0], dims[1]) {
                return Err(Error::shape(
                    "GcnParams",
                    format!("layer {l} weight {:?}, expected {:?}", w.shape(), (dims[0], dims[1])),
                ));
            }
        }
        Ok(())
    }

    pub fn squared_norm(&self) -> f64 {
        self.weights.iter().map(Matrix::squared_norm).sum()
    }
}

/// Keep mask for one layer: entry `(p, k)` is pair `p` of the
/// [`NeighborIndex`] and input feature `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    width: usize,
    keep: Vec<bool>,
}

impl LayerMask {
    pub fn new(width: usize, keep: Vec<bool>) -> Result<Self> {
        if width == 0 || keep.len() % width != 0 {
            return Err(Error::shape(
                "LayerMask",
                format!("{} entries for width {width}", keep.len()),
            ));
        }
        Ok(Self { width, keep })
    }

    pub fn all_kept(num_pairs: usize, width: usize) -> Self {
        Self {
            width,
            keep: vec![true; num_pairs * width],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pairs(&self) -> usize {
        self.keep.len() / self.width
    }

    pub fn keep(&self, pair: usize, feature: usize) -> bool {
        self.keep[pair * self.width + feature]
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.keep
    }

    pub fn kept_fraction(&self) -> f64 {
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len() as f64
    }
}

/// Activations saved by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    aggregated: Vec<Matrix>,
    preactivations: Vec<Matrix>,
    /// Per hidden layer, the inverted-dropout scale of each output entry.
    dropout_scales: Vec<Option<Vec<f64>>>,
    masks: Option<Vec<LayerMask>>,
    logits: Matrix,
}

impl ForwardCache {
    /// Per-item logits (nodes, or graphs after readout).
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn into_logits(self) -> Matrix {
        self.logits
    }

    pub fn masks(&self) -> Option<&[LayerMask]> {
        self.masks.as_deref()
    }

    pub fn num_layers(&self) -> usize {
        self.aggregated.len()
    }
}

fn aggregate(index: &NeighborIndex, x: &Matrix, mask: Option<&LayerMask>) -> Matrix {
    let width = x.cols();
    let mut out = Matrix::zeros(x.rows(), width);
    let targets = index.targets();
    for v in 0..x.rows() {
        let range = index.pair_range(v);
        let c_v = range.len() as f64;
        let row = out.row_mut(v);
        for p in range {
            let xu = x.row(targets[p]);
            match mask {
                None => {
                    for (o, &xi) in row.iter_mut().zip(xu) {
                        *o += xi;
                    }
                }
                Some(m) => {
                    let bits = &m.keep[p * width..(p + 1) * width];
                    for ((o, &xi), &kept) in row.iter_mut().zip(xu).zip(bits) {
                        if kept {
                            *o += xi;
                        }
                    }
                }
            }
        }
        for o in row.iter_mut() {
            *o /= c_v;
        }
    }
    out
}

/// Transpose of [`aggregate`]: scatters `d_agg` back onto the layer input.
fn aggregate_backward(index: &NeighborIndex, d_agg: &Matrix, mask: Option<&LayerMask>) -> Matrix {
    let width = d_agg.cols();
    let mut out = Matrix::zeros(d_agg.rows(), width);
    let targets = index.targets();
    for v in 0..d_agg.rows() {
        let range = index.pair_range(v);
        let c_v = range.len() as f64;
        let scaled: Vec<f64> = d_agg.row(v).iter().map(|g| g / c_v).collect();
        for p in range {
            let row = out.row_mut(targets[p]);
            match mask {
                None => {
                    for (o, g) in row.iter_mut().zip(&scaled) {
                        *o += g;
                    }
                }
                Some(m) => {
                    let bits = &m.keep[p * width..(p + 1) * width];
                    for ((o, g), &kept) in row.iter_mut().zip(&scaled).zip(bits) {
                        if kept {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
    out
}

fn readout(bundle: &GraphBundle, kind: Readout, node_out: &Matrix) -> Matrix {
    let Some(graphs) = &bundle.graphs else {
        return node_out.clone();
    };
    let mut pooled = Matrix::zeros(graphs.num_graphs(), node_out.cols());
    let mut counts = vec![0usize; graphs.num_graphs()];
    for (v, &g) in graphs.graph_of_node.iter().enumerate() {
        counts[g] += 1;
        for (o, x) in pooled.row_mut(g).iter_mut().zip(node_out.row(v)) {
            *o += x;
        }
    }
    if kind == Readout::Mean {
        for (g, &n) in counts.iter().enumerate() {
            if n > 0 {
                pooled.row_mut(g).iter_mut().for_each(|x| *x /= n as f64);
            }
        }
    }
    pooled
}

fn readout_backward(bundle: &GraphBundle, kind: Readout, d_items: &Matrix) -> Matrix {
    let Some(graphs) = &bundle.graphs else {
        return d_items.clone();
    };
    let mut counts = vec![0usize; graphs.num_graphs()];
    for &g in &graphs.graph_of_node {
        counts[g] += 1;
    }
    let mut out = Matrix::zeros(bundle.num_nodes, d_items.cols());
    for (v, &g) in graphs.graph_of_node.iter().enumerate() {
        let scale = match kind {
            Readout::Mean => 1.0 / counts[g] as f64,
            _ => 1.0,
        };
        for (o, d) in out.row_mut(v).iter_mut().zip(d_items.row(g)) {
            *o = d * scale;
        }
    }
    out
}

/// Forward pass with optional keep masks and optional training dropout.
pub(crate) fn forward_pass(
    config: &GcnConfig,
    params: &GcnParams,
    bundle: &GraphBundle,
    index: &NeighborIndex,
    masks: Option<Vec<LayerMask>>,
    mut dropout_rng: Option<&mut RngState>,
) -> Result<ForwardCache> {
    config.validate_for(bundle)?;
    params.check(config)?;
    if index.num_nodes() != bundle.num_nodes {
        return Err(Error::shape(
            "gcn_forward",
            format!("index has {} nodes, bundle {}", index.num_nodes(), bundle.num_nodes),
        ));
    }
    if let Some(masks) = &masks {
        if masks.len() != config.num_layers() {
            return Err(Error::shape(
                "gdc_forward",
                format!("{} masks for {} layers", masks.len(), config.num_layers()),
            ));
        }
        for (l, m) in masks.iter().enumerate() {
            if m.width() != config.layer_dims[l] || m.num_pairs() != index.num_pairs() {
                return Err(Error::shape(
                    "gdc_forward",
                    format!(
                        "layer {l} mask is {}x{}, expected {}x{}",
                        m.num_pairs(),
                        m.width(),
                        index.num_pairs(),
                        config.layer_dims[l]
                    ),
                ));
            }
        }
    }

    let num_layers = config.num_layers();
    let mut aggregated = Vec::with_capacity(num_layers);
    let mut preactivations = Vec::with_capacity(num_layers);
    let mut dropout_scales = Vec::with_capacity(num_layers);
    let mut x = bundle.features.clone();
    for (l, w) in params.weights.iter().enumerate() {
        let mask = masks.as_ref().map(|m| &m[l]);
        let agg = aggregate(index, &x, mask);
        let pre = agg.matmul(w)?;
        let last = l + 1 == num_layers;
        let mut out = pre.clone();
        let mut scales = None;
        if !last {
            out.data_mut().iter_mut().for_each(|h| *h = h.max(0.0));
            if let (Some(rng), true) = (dropout_rng.as_deref_mut(), config.dropout_rate > 0.0) {
                let keep_scale = 1.0 / (1.0 - config.dropout_rate);
                let s: Vec<f64> = (0..out.data().len())
                    .map(|_| if rng.uniform() < config.dropout_rate { 0.0 } else { keep_scale })
                    .collect();
                out.data_mut().iter_mut().zip(&s).for_each(|(h, k)| *h *= k);
                scales = Some(s);
            }
        }
        x = out;
        aggregated.push(agg);
        preactivations.push(pre);
        dropout_scales.push(scales);
    }
    let logits = readout(bundle, config.readout, &x);
    if !logits.is_finite() {
        return Err(Error::InvalidArgument("non-finite logits".into()));
    }
    Ok(ForwardCache {
        aggregated,
        preactivations,
        dropout_scales,
        masks,
        logits,
    })
}

/// Deterministic forward pass (no masks, no dropout).
pub fn gcn_forward(
    config: &GcnConfig,
    params: &GcnParams,
    bundle: &GraphBundle,
    index: &NeighborIndex,
) -> Result<ForwardCache> {
    forward_pass(config, params, bundle, index, None, None)
}

/// Mean cross-entropy over `items` and its gradient w.r.t. the logits.
/// An empty item set has loss 0 and zero gradient.
pub fn cross_entropy(logits: &Matrix, labels: &[usize], items: &[usize]) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if items.is_empty() {
        return Ok((0.0, grad));
    }
    let n = items.len() as f64;
    let mut loss = 0.0;
    for &i in items {
        let y = *labels
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("item {i} has no label")))?;
        if i >= logits.rows() || y >= logits.cols() {
            return Err(Error::InvalidArgument(format!("item {i} / label {y} out of range")));
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[y];
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            *g += (p - if k == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Mean cross-entropy over the training items (no regularizer).
    pub data_loss: f64,
    pub weights: Vec<Matrix>,
}

/// Backpropagates an arbitrary gradient on the item logits through the
/// network. Returns per-layer weight gradients.
pub(crate) fn backprop_logits(
    config: &GcnConfig,
    params: &GcnParams,
    bundle: &GraphBundle,
    index: &NeighborIndex,
    cache: &ForwardCache,
    d_logits: &Matrix,
) -> Result<Vec<Matrix>> {
    let num_layers = config.num_layers();
    if cache.num_layers() != num_layers || params.weights.len() != num_layers {
        return Err(Error::Cache(format!(
            "cache has {} layers, model {}",
            cache.num_layers(),
            num_layers
        )));
    }
    if d_logits.shape() != cache.logits.shape() {
        return Err(Error::Cache("logit gradient shape differs from cached logits".into()));
    }
    let mut grads = vec![Matrix::zeros(0, 0); num_layers];
    let mut d_out = readout_backward(bundle, config.readout, d_logits);
    for l in (0..num_layers).rev() {
        let mut d_pre = d_out;
        if l + 1 < num_layers {
            if let Some(scales) = &cache.dropout_scales[l] {
                d_pre.data_mut().iter_mut().zip(scales).for_each(|(d, s)| *d *= s);
            }
            let pre = cache.preactivations[l].data();
            d_pre.data_mut().iter_mut().zip(pre).for_each(|(d, &s)| {
                if s <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        grads[l] = cache.aggregated[l].t_matmul(&d_pre)?;
        if l > 0 {
            let d_agg = d_pre.matmul_t(&params.weights[l])?;
            let mask = cache.masks.as_ref().map(|m| &m[l]);
            d_out = aggregate_backward(index, &d_agg, mask);
        } else {
            d_out = Matrix::zeros(0, 0);
        }
    }
    Ok(grads)
}

/// Exact gradient of `mean CE(train items) + (weight_decay / 2) · Σ‖W‖²`.
pub fn gcn_backward(
    config: &GcnConfig,
    params: &GcnParams,
    bundle: &GraphBundle,
    index: &NeighborIndex,
    cache: &ForwardCache,
    train_items: &[usize],
) -> Result<Gradients> {
    let (data_loss, d_logits) = cross_entropy(&cache.logits, bundle.item_labels(), train_items)?;
    let mut weights = backprop_logits(config, params, bundle, index, cache, &d_logits)?;
    if config.weight_decay > 0.0 {
        for (g, w) in weights.iter_mut().zip(&params.weights) {
            g.add_scaled(w, config.weight_decay)?;
        }
    }
    Ok(Gradients { data_loss, weights })
}

/// Training objective value matching [`gcn_backward`]'s gradient.
pub fn regularized_loss(config: &GcnConfig, params: &GcnParams, data_loss: f64) -> f64 {
    data_loss + 0.5 * config.weight_decay * params.squared_norm()
}

pub fn argmax(row: &[f64]) -> usize {
    // lowest index wins ties
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

pub fn accuracy(scores: &Matrix, labels: &[usize], items: &[usize]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let hits = items
        .iter()
        .filter(|&&i| argmax(scores.row(i)) == labels[i])
        .count();
    hits as f64 / items.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedGcn {
    pub config: GcnConfig,
    pub params: GcnParams,
    pub log: TrainingLog,
}

impl TrainedGcn {
    /// Class probabilities per item with dropout disabled.
    pub fn predict(&self, bundle: &GraphBundle, index: &NeighborIndex) -> Result<Matrix> {
        let cache = gcn_forward(&self.config, &self.params, bundle, index)?;
        Ok(softmax_rows(cache.logits()))
    }
}

/// Full-batch Adam training on `split.train`. Weights are drawn from `rng`
/// first; dropout masks come from per-epoch substreams of `rng`.
pub fn train_frequentist(
    bundle: &GraphBundle,
    split: &SplitSpec,
    config: &GcnConfig,
    rng: &mut RngState,
    epochs: usize,
    learning_rate: f64,
) -> Result<TrainedGcn> {
    config.validate_for(bundle)?;
    let index = NeighborIndex::from_bundle(bundle);
    let mut params = GcnParams::init(config, rng);
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(learning_rate), &params.weights);
    let mut log = TrainingLog::default();
    for epoch in 0..epochs {
        let mut dropout_rng = rng.substream(&[0xD0, epoch as u64]);
        let cache = forward_pass(config, &params, bundle, &index, None, Some(&mut dropout_rng))?;
        let grads = gcn_backward(config, &params, bundle, &index, &cache, &split.train)?;
        let loss = regularized_loss(config, &params, grads.data_loss);
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss,
            train_accuracy: accuracy(cache.logits(), bundle.item_labels(), &split.train),
        });
        adam_step(&mut params.weights, &grads.weights, &mut adam)?;
        if params.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
    }
    Ok(TrainedGcn {
        config: config.clone(),
        params,
        log,
    })
}

pub(crate) fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 8 * m.data().len());
    bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let word = |i: usize| -> Option<[u8; 8]> { bytes.get(i * 8..i * 8 + 8)?.try_into().ok() };
    let bad = || Error::InvalidArgument(format!("{}: truncated matrix file", path.display()));
    let rows = u64::from_le_bytes(word(0).ok_or_else(bad)?) as usize;
    let cols = u64::from_le_bytes(word(1).ok_or_else(bad)?) as usize;
    if bytes.len() != 16 + 8 * rows * cols {
        return Err(bad());
    }
    let data = (0..rows * cols)
        .map(|i| f64::from_le_bytes(word(i + 2).expect("length checked")))
        .collect();
    Matrix::new(rows, cols, data)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn save_weights(dir: &Path, params: &GcnParams) -> Result<()> {
    for (l, w) in params.weights.iter().enumerate() {
        write_matrix(&dir.join(format!("layer_{l}.bin")), w)?;
    }
    Ok(())
}

pub(crate) fn load_weights(dir: &Path, config: &GcnConfig) -> Result<GcnParams> {
    let weights = (0..config.num_layers())
        .map(|l| read_matrix(&dir.join(format!("layer_{l}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    let params = GcnParams { weights };
    params.check(config)?;
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: String,
    config: GcnConfig,
}

/// Writes `meta.json` plus `layer_<l>.bin` per layer: two little-endian
/// `u64` (rows, cols) followed by the row-major `f64` values.
pub fn save_checkpoint(dir: impl AsRef<Path>, config: &GcnConfig, params: &GcnParams) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        model: "frequentist".into(),
        config: config.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    save_weights(dir, params)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(GcnConfig, GcnParams)> {
    let dir = dir.as_ref();
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let params = load_weights(dir, &meta.config)?;
    Ok((meta.config, params))
}
