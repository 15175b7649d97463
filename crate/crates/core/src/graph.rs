//! Graph data model, bundle format, synthetic generators and split resampling.
//!
//! A bundle is a directory:
//!
//! ```text
//! meta.json          {"dataset", "num_nodes", "num_classes", "feature_dim", "task"}
//! edges.csv          u,v per row, no header
//! features.csv       num_nodes rows of feature_dim comma-separated floats
//! labels.csv         one class index per node
//! graph_index.csv    graph-classification only: graph id per node
//! graph_labels.csv   graph-classification only: class index per graph
//! train_index.csv    optional: fixed training item ids, one per row
//! ```
//!
//! Graph-classification bundles are stored as the disjoint union of their
//! graphs; `graph_index.csv` says which graph each node belongs to. An "item"
//! is a node for node tasks and a graph for graph tasks.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{BundleError, Error, Result};
use crate::numerics::{Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    NodeClassification,
    GraphClassification,
}

/// Node-to-graph assignment for graph-classification bundles.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMembership {
    pub graph_of_node: Vec<usize>,
    pub graph_labels: Vec<usize>,
}

impl GraphMembership {
    pub fn num_graphs(&self) -> usize {
        self.graph_labels.len()
    }

    /// Node ids of each graph, in increasing order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_graphs()];
        for (v, &g) in self.graph_of_node.iter().enumerate() {
            out[g].push(v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    pub name: String,
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Edges as given; duplicates, reversed pairs and self-loops are tolerated
    /// here and normalized by [`NeighborIndex`].
    pub edges: Vec<(usize, usize)>,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub task: Task,
    pub graphs: Option<GraphMembership>,
    pub train_index: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    dataset: String,
    num_nodes: usize,
    num_classes: usize,
    feature_dim: usize,
    task: Task,
}

impl GraphBundle {
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_items(&self) -> usize {
        match &self.graphs {
            Some(g) => g.num_graphs(),
            None => self.num_nodes,
        }
    }

    /// Labels of the prediction targets (nodes or graphs).
    pub fn item_labels(&self) -> &[usize] {
        match &self.graphs {
            Some(g) => &g.graph_labels,
            None => &self.labels,
        }
    }

    /// Number of distinct undirected non-loop edges.
    pub fn undirected_edge_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|(u, v)| u != v)
            .map(|&(u, v)| (u.min(v), u.max(v)))
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(BundleError::Invalid(msg).into());
        if self.features.rows() != self.num_nodes {
            return invalid(format!(
                "features have {} rows for {} nodes",
                self.features.rows(),
                self.num_nodes
            ));
        }
        if self.labels.len() != self.num_nodes {
            return invalid(format!("{} labels for {} nodes", self.labels.len(), self.num_nodes));
        }
        if let Some(&(u, v)) = self
            .edges
            .iter()
            .find(|(u, v)| *u >= self.num_nodes || *v >= self.num_nodes)
        {
            return invalid(format!("edge ({u}, {v}) out of range"));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return invalid(format!("label {y} out of range"));
        }
        if !self.features.is_finite() {
            return invalid("non-finite feature".into());
        }
        match (&self.graphs, self.task) {
            (None, Task::NodeClassification) => {}
            (Some(g), Task::GraphClassification) => {
                if g.graph_of_node.len() != self.num_nodes {
                    return invalid("graph_index length differs from num_nodes".into());
                }
                if let Some(&gid) = g.graph_of_node.iter().find(|&&gid| gid >= g.num_graphs()) {
                    return invalid(format!("graph id {gid} out of range"));
                }
                if let Some(&y) = g.graph_labels.iter().find(|&&y| y >= self.num_classes) {
                    return invalid(format!("graph label {y} out of range"));
                }
                if g.num_graphs() == 0 {
                    return invalid("graph-classification bundle without graphs".into());
                }
            }
            _ => return invalid("task does not match presence of graph membership".into()),
        }
        if let Some(train) = &self.train_index {
            if let Some(&i) = train.iter().find(|&&i| i >= self.num_items()) {
                return invalid(format!("train item {i} out of range"));
            }
            if train.iter().collect::<BTreeSet<_>>().len() != train.len() {
                return invalid("duplicate train item".into());
            }
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(BundleError::MissingFile(path.to_path_buf()).into());
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field.trim().parse().map_err(|_| {
        BundleError::Parse {
            path: path.to_path_buf(),
            line,
            detail: format!("cannot parse {field:?}"),
        }
        .into()
    })
}

fn read_index_column(path: &Path, bound: usize, labels: bool) -> Result<Vec<usize>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (line, l) in data_lines(&text) {
        let value: usize = parse_field(path, line, l)?;
        if value >= bound {
            let path = path.to_path_buf();
            return Err(if labels {
                BundleError::LabelOutOfRange {
                    path,
                    line,
                    label: value,
                    num_classes: bound,
                }
            } else {
                BundleError::IndexOutOfRange {
                    path,
                    line,
                    index: value,
                    num_nodes: bound,
                }
            }
            .into());
        }
        out.push(value);
    }
    Ok(out)
}

fn expect_rows(path: &Path, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(BundleError::RowCount {
            path: path.to_path_buf(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

/// Reads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraphBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: BundleMeta =
        serde_json::from_str(&read_file(&meta_path)?).map_err(|e| BundleError::MalformedMeta {
            path: meta_path.clone(),
            detail: e.to_string(),
        })?;
    if meta.num_classes == 0 {
        return Err(BundleError::MalformedMeta {
            path: meta_path,
            detail: "num_classes must be positive".into(),
        }
        .into());
    }

    let edges_path = dir.join("edges.csv");
    let text = read_file(&edges_path)?;
    let mut edges = Vec::new();
    for (line, l) in data_lines(&text) {
        let mut cols = l.split(',');
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(BundleError::Parse {
                path: edges_path,
                line,
                detail: "expected two columns".into(),
            }
            .into());
        };
        let u: usize = parse_field(&edges_path, line, a)?;
        let v: usize = parse_field(&edges_path, line, b)?;
        for index in [u, v] {
            if index >= meta.num_nodes {
                return Err(BundleError::IndexOutOfRange {
                    path: edges_path,
                    line,
                    index,
                    num_nodes: meta.num_nodes,
                }
                .into());
            }
        }
        edges.push((u, v));
    }

    let features_path = dir.join("features.csv");
    let text = read_file(&features_path)?;
    let mut data = Vec::with_capacity(meta.num_nodes * meta.feature_dim);
    let mut rows = 0;
    for (line, l) in data_lines(&text) {
        let before = data.len();
        for field in l.split(',') {
            data.push(parse_field::<f64>(&features_path, line, field)?);
        }
        if data.len() - before != meta.feature_dim {
            return Err(BundleError::Parse {
                path: features_path,
                line,
                detail: format!(
                    "expected {} feature columns, found {}",
                    meta.feature_dim,
                    data.len() - before
                ),
            }
            .into());
        }
        rows += 1;
    }
    expect_rows(&features_path, meta.num_nodes, rows)?;
    let features = Matrix::new(meta.num_nodes, meta.feature_dim, data)?;

    let labels_path = dir.join("labels.csv");
    let labels = read_index_column(&labels_path, meta.num_classes, true)?;
    expect_rows(&labels_path, meta.num_nodes, labels.len())?;

    let graphs = match meta.task {
        Task::NodeClassification => None,
        Task::GraphClassification => {
            let labels_path = dir.join("graph_labels.csv");
            let graph_labels = read_index_column(&labels_path, meta.num_classes, true)?;
            let index_path = dir.join("graph_index.csv");
            let graph_of_node = read_index_column(&index_path, graph_labels.len(), false)?;
            expect_rows(&index_path, meta.num_nodes, graph_of_node.len())?;
            Some(GraphMembership {
                graph_of_node,
                graph_labels,
            })
        }
    };

    let train_path = dir.join("train_index.csv");
    let train_index = if train_path.exists() {
        let items = graphs.as_ref().map_or(meta.num_nodes, GraphMembership::num_graphs);
        Some(read_index_column(&train_path, items, false)?)
    } else {
        None
    };

    let bundle = GraphBundle {
        name: meta.dataset,
        num_nodes: meta.num_nodes,
        num_classes: meta.num_classes,
        edges,
        features,
        labels,
        task: meta.task,
        graphs,
        train_index,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn write_file(path: PathBuf, contents: String) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

fn index_column(values: &[usize]) -> String {
    values.iter().fold(String::new(), |mut s, v| {
        let _ = writeln!(s, "{v}");
        s
    })
}

/// Writes `bundle` in the bundle format. Floats use shortest round-trip
/// formatting, so `load_bundle(save_bundle(b)) == b` bit for bit.
pub fn save_bundle(bundle: &GraphBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = BundleMeta {
        dataset: bundle.name.clone(),
        num_nodes: bundle.num_nodes,
        num_classes: bundle.num_classes,
        feature_dim: bundle.feature_dim(),
        task: bundle.task,
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    write_file(meta_path, json + "\n")?;

    let mut edges = String::new();
    for (u, v) in &bundle.edges {
        let _ = writeln!(edges, "{u},{v}");
    }
    write_file(dir.join("edges.csv"), edges)?;

    let mut features = String::new();
    for r in 0..bundle.num_nodes {
        let row = bundle.features.row(r);
        for (k, x) in row.iter().enumerate() {
            if k > 0 {
                features.push(',');
            }
            let _ = write!(features, "{x:?}");
        }
        features.push('\n');
    }
    write_file(dir.join("features.csv"), features)?;
    write_file(dir.join("labels.csv"), index_column(&bundle.labels))?;

    if let Some(g) = &bundle.graphs {
        write_file(dir.join("graph_index.csv"), index_column(&g.graph_of_node))?;
        write_file(dir.join("graph_labels.csv"), index_column(&g.graph_labels))?;
    }
    if let Some(train) = &bundle.train_index {
        write_file(dir.join("train_index.csv"), index_column(train))?;
    }
    Ok(())
}

/// Undirected adjacency in CSR form. Row `v` lists `N(v) ∪ {v}` in increasing
/// order; position `p` in the flattened list identifies the directed pair
/// `(v, targets[p])`, which is what per-edge masks are indexed by.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl NeighborIndex {
    /// Symmetrizes `edges`, drops self-loops and duplicates, then adds each
    /// node's self pair exactly once.
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut adjacency: Vec<BTreeSet<usize>> = (0..num_nodes).map(|v| BTreeSet::from([v])).collect();
        for &(u, v) in edges {
            if u != v {
                adjacency[u].insert(v);
                adjacency[v].insert(u);
            }
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for set in adjacency {
            targets.extend(set);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    pub fn from_bundle(bundle: &GraphBundle) -> Self {
        Self::new(bundle.num_nodes, &bundle.edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of directed pairs including self pairs.
    pub fn num_pairs(&self) -> usize {
        self.targets.len()
    }

    pub fn pair_range(&self, v: usize) -> std::ops::Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// `|N(v)| + 1`.
    pub fn degree_with_self(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Neighbors of `v`, excluding `v` itself.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.targets[self.pair_range(v)]
            .iter()
            .copied()
            .filter(move |&u| u != v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.train
            .iter()
            .chain(&self.calibration)
            .chain(&self.test)
            .all(|i| seen.insert(*i))
    }

    /// Calibration and test ids together, sorted.
    pub fn pooled_eval(&self) -> Vec<usize> {
        let mut pooled: Vec<usize> = self.calibration.iter().chain(&self.test).copied().collect();
        pooled.sort_unstable();
        pooled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub calibration: usize,
    pub test: usize,
}

fn too_large(requested: usize, population: usize) -> Error {
    Error::InvalidArgument(format!(
        "split needs {requested} items but only {population} are available"
    ))
}

/// Uniformly random disjoint train/calibration/test sets over `0..num_items`.
pub fn resample_split(rng: &mut RngState, num_items: usize, sizes: SplitSizes) -> Result<SplitSpec> {
    let total = sizes.train + sizes.calibration + sizes.test;
    if total > num_items {
        return Err(too_large(total, num_items));
    }
    let mut ids: Vec<usize> = (0..num_items).collect();
    rng.shuffle(&mut ids);
    let (train, rest) = ids.split_at(sizes.train);
    let (calibration, rest) = rest.split_at(sizes.calibration);
    Ok(SplitSpec {
        train: train.to_vec(),
        calibration: calibration.to_vec(),
        test: rest[..sizes.test].to_vec(),
        seed: rng.seed(),
    })
}

/// Keeps `train` fixed and draws calibration and test uniformly from the
/// remaining items.
pub fn resample_calibration_test(
    rng: &mut RngState,
    num_items: usize,
    train: &[usize],
    n_cal: usize,
    n_test: usize,
) -> Result<SplitSpec> {
    let excluded: BTreeSet<usize> = train.iter().copied().collect();
    let mut pool: Vec<usize> = (0..num_items).filter(|i| !excluded.contains(i)).collect();
    if n_cal + n_test > pool.len() {
        return Err(too_large(n_cal + n_test, pool.len()));
    }
    rng.shuffle(&mut pool);
    Ok(SplitSpec {
        train: train.to_vec(),
        calibration: pool[..n_cal].to_vec(),
        test: pool[n_cal..n_cal + n_test].to_vec(),
        seed: rng.seed(),
    })
}

/// Stochastic block model parameters. Node `i` belongs to community
/// `i / nodes_per_community`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub communities: usize,
    pub nodes_per_community: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Standard deviation of Gaussian noise added to the one-hot features.
    pub feature_noise: f64,
    /// Probability that a node's label is replaced by a uniformly drawn class.
    #[serde(default)]
    pub label_noise: f64,
}

/// Samples an SBM graph whose features are the one-hot community indicator
/// plus `N(0, feature_noise²)` noise.
pub fn generate_sbm(rng: &mut RngState, spec: &SbmSpec) -> Result<GraphBundle> {
    let SbmSpec {
        communities,
        nodes_per_community,
        p_in,
        p_out,
        feature_noise,
        label_noise,
    } = *spec;
    if !(0.0 <= p_out && p_out <= p_in && p_in <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "SBM needs 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    if !(0.0..=1.0).contains(&label_noise) || !(feature_noise >= 0.0) || communities == 0 {
        return Err(Error::InvalidArgument(format!(
            "invalid SBM spec: {spec:?}"
        )));
    }
    let n = communities * nodes_per_community;
    let community = |i: usize| i / nodes_per_community;
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if community(u) == community(v) { p_in } else { p_out };
            if rng.uniform() < p {
                edges.push((u, v));
            }
        }
    }
    let mut features = Matrix::zeros(n, communities);
    for v in 0..n {
        let row = features.row_mut(v);
        for (k, x) in row.iter_mut().enumerate() {
            let signal = if k == community(v) { 1.0 } else { 0.0 };
            *x = signal + feature_noise * rng.normal();
        }
    }
    let labels = (0..n)
        .map(|v| {
            if label_noise > 0.0 && rng.uniform() < label_noise {
                rng.below(communities)
            } else {
                community(v)
            }
        })
        .collect();
    Ok(GraphBundle {
        name: "sbm".into(),
        num_nodes: n,
        num_classes: communities,
        edges,
        features,
        labels,
        task: Task::NodeClassification,
        graphs: None,
        train_index: None,
    })
}

/// Synthetic graph-classification set: each graph is an Erdős–Rényi graph
/// whose node features are a noisy one-hot of the graph's class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphSetSpec {
    pub num_graphs: usize,
    pub num_classes: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub edge_prob: f64,
    pub feature_noise: f64,
}

pub fn generate_graph_set(rng: &mut RngState, spec: &GraphSetSpec) -> Result<GraphBundle> {
    if spec.min_nodes == 0
        || spec.min_nodes > spec.max_nodes
        || spec.num_classes == 0
        || spec.num_graphs == 0
        || !(0.0..=1.0).contains(&spec.edge_prob)
    {
        return Err(Error::InvalidArgument(format!("invalid graph set spec: {spec:?}")));
    }
    let mut edges = Vec::new();
    let mut rows = Vec::new();
    let mut graph_of_node = Vec::new();
    let mut graph_labels = Vec::new();
    for g in 0..spec.num_graphs {
        let class = rng.below(spec.num_classes);
        let size = spec.min_nodes + rng.below(spec.max_nodes - spec.min_nodes + 1);
        let base = graph_of_node.len();
        for a in 0..size {
            for b in a + 1..size {
                if rng.uniform() < spec.edge_prob {
                    edges.push((base + a, base + b));
                }
            }
        }
        for _ in 0..size {
            let row = (0..spec.num_classes)
                .map(|k| f64::from(u8::from(k == class)) + spec.feature_noise * rng.normal())
                .collect();
            rows.push(row);
            graph_of_node.push(g);
        }
        graph_labels.push(class);
    }
    let num_nodes = graph_of_node.len();
    let labels = graph_of_node.iter().map(|&g| graph_labels[g]).collect();
    Ok(GraphBundle {
        name: "graph-set".into(),
        num_nodes,
        num_classes: spec.num_classes,
        edges,
        features: Matrix::from_rows(&rows)?,
        labels,
        task: Task::GraphClassification,
        graphs: Some(GraphMembership {
            graph_of_node,
            graph_labels,
        }),
        train_index: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_node_bundle() -> GraphBundle {
        GraphBundle {
            name: "pair".into(),
            num_nodes: 2,
            num_classes: 2,
            edges: vec![(0, 1)],
            features: Matrix::from_rows(&[vec![0.1, -2.5e-7], vec![1.0 / 3.0, 42.0]]).unwrap(),
            labels: vec![0, 1],
            task: Task::NodeClassification,
            graphs: None,
            train_index: None,
        }
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = two_node_bundle();
        save_bundle(&bundle, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), bundle);
    }

    #[test]
    fn graph_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GraphSetSpec {
            num_graphs: 5,
            num_classes: 3,
            min_nodes: 2,
            max_nodes: 4,
            edge_prob: 0.5,
            feature_noise: 0.3,
        };
        let mut bundle = generate_graph_set(&mut RngState::new(4), &spec).unwrap();
        bundle.train_index = Some(vec![0, 3]);
        save_bundle(&bundle, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), bundle);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::Bundle(BundleError::MissingFile(_)))
        ));

        save_bundle(&two_node_bundle(), dir.path()).unwrap();
        fs::write(dir.path().join("edges.csv"), "0,1\n1,5\n").unwrap();
        match load_bundle(dir.path()) {
            Err(Error::Bundle(BundleError::IndexOutOfRange { line, index, .. })) => {
                assert_eq!((line, index), (2, 5));
            }
            other => panic!("unexpected {other:?}"),
        }

        save_bundle(&two_node_bundle(), dir.path()).unwrap();
        fs::write(dir.path().join("labels.csv"), "0\n2\n").unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::Bundle(BundleError::LabelOutOfRange { line: 2, label: 2, .. }))
        ));

        save_bundle(&two_node_bundle(), dir.path()).unwrap();
        fs::write(dir.path().join("meta.json"), "{\"num_nodes\": 2}").unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::Bundle(BundleError::MalformedMeta { .. }))
        ));

        save_bundle(&two_node_bundle(), dir.path()).unwrap();
        fs::write(dir.path().join("features.csv"), "0.1,0.2\nx,1\n").unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::Bundle(BundleError::Parse { line: 2, .. }))
        ));
    }

    #[test]
    fn neighbor_index_normalizes_edges() {
        let idx = NeighborIndex::new(4, &[(0, 1), (1, 0), (0, 1), (2, 2), (1, 2)]);
        assert_eq!(idx.neighbors(0).collect::<Vec<_>>(), vec![1]);
        assert_eq!(idx.neighbors(1).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(idx.neighbors(2).collect::<Vec<_>>(), vec![1]);
        assert_eq!(idx.degree_with_self(1), 3);
        // isolated node aggregates only itself
        assert_eq!(idx.degree_with_self(3), 1);
        assert_eq!(idx.neighbors(3).count(), 0);
    }

    #[test]
    fn sbm_disjoint_triangles() {
        let spec = SbmSpec {
            communities: 2,
            nodes_per_community: 3,
            p_in: 1.0,
            p_out: 0.0,
            feature_noise: 0.0,
            label_noise: 0.0,
        };
        let g = generate_sbm(&mut RngState::new(0), &spec).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]);
        assert_eq!(g.labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn sbm_rejects_bad_probabilities() {
        let mut spec = SbmSpec {
            communities: 2,
            nodes_per_community: 3,
            p_in: 0.1,
            p_out: 0.2,
            feature_noise: 0.0,
            label_noise: 0.0,
        };
        assert!(generate_sbm(&mut RngState::new(0), &spec).is_err());
        spec.p_in = 1.2;
        assert!(generate_sbm(&mut RngState::new(0), &spec).is_err());
    }

    #[test]
    fn sbm_edge_count_matches_binomial_mean() {
        // p_in = p_out = p: edge count ~ Binomial(n(n-1)/2, p).
        let (n, p, seeds) = (40usize, 0.1, 200u64);
        let pairs = (n * (n - 1) / 2) as f64;
        let spec = SbmSpec {
            communities: 4,
            nodes_per_community: n / 4,
            p_in: p,
            p_out: p,
            feature_noise: 0.0,
            label_noise: 0.0,
        };
        let total: usize = (0..seeds)
            .map(|s| generate_sbm(&mut RngState::new(s), &spec).unwrap().edges.len())
            .sum();
        let mean = total as f64 / seeds as f64;
        let se = (pairs * p * (1.0 - p) / seeds as f64).sqrt();
        assert!((mean - pairs * p).abs() < 3.0 * se, "mean {mean} vs {}", pairs * p);
    }

    #[test]
    fn noise_free_sbm_features_are_separable() {
        let spec = SbmSpec {
            communities: 3,
            nodes_per_community: 20,
            p_in: 0.3,
            p_out: 0.05,
            feature_noise: 0.0,
            label_noise: 0.0,
        };
        let g = generate_sbm(&mut RngState::new(8), &spec).unwrap();
        // identity linear probe
        for v in 0..g.num_nodes {
            let row = g.features.row(v);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, g.labels[v]);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let sizes = SplitSizes {
            train: 140,
            calibration: 500,
            test: 1000,
        };
        let a = resample_split(&mut RngState::new(1), 2708, sizes).unwrap();
        assert_eq!((a.train.len(), a.calibration.len(), a.test.len()), (140, 500, 1000));
        assert!(a.is_disjoint());
        let b = resample_split(&mut RngState::new(2), 2708, sizes).unwrap();
        assert_ne!(a.calibration, b.calibration);
        assert_eq!(a, resample_split(&mut RngState::new(1), 2708, sizes).unwrap());

        let empty_cal = resample_calibration_test(&mut RngState::new(3), 10, &a.train[..0], 0, 5).unwrap();
        assert!(empty_cal.calibration.is_empty());
        assert!(resample_split(&mut RngState::new(1), 10, sizes).is_err());
    }

    proptest! {
        #[test]
        fn neighbor_index_is_order_independent_and_symmetric(
            edges in prop::collection::vec((0usize..12, 0usize..12), 0..40),
            seed in any::<u64>(),
        ) {
            let mut shuffled: Vec<_> = edges.iter().map(|&(u, v)| if seed % 2 == 0 { (v, u) } else { (u, v) }).collect();
            RngState::new(seed).shuffle(&mut shuffled);
            let a = NeighborIndex::new(12, &edges);
            prop_assert_eq!(&a, &NeighborIndex::new(12, &shuffled));
            for v in 0..12 {
                prop_assert_eq!(a.degree_with_self(v), a.neighbors(v).count() + 1);
                for u in a.neighbors(v) {
                    prop_assert!(a.neighbors(u).any(|w| w == v));
                }
            }
        }

        #[test]
        fn fixed_train_splits_are_disjoint_and_pool_is_stable(seed in any::<u64>(), n_cal in 0usize..30, n_test in 0usize..30) {
            let train: Vec<usize> = (0..20).collect();
            let s = resample_calibration_test(&mut RngState::new(seed), 100, &train, n_cal, n_test).unwrap();
            prop_assert!(s.is_disjoint());
            let mut swapped = s.clone();
            if !swapped.calibration.is_empty() && !swapped.test.is_empty() {
                std::mem::swap(&mut swapped.calibration[0], &mut swapped.test[0]);
            }
            prop_assert_eq!(s.pooled_eval(), swapped.pooled_eval());
        }
    }
}
