use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Bundle(#[from] BundleError),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("operation requires learnable drop rates (ARM mode)")]
    FixedRateMode,

    #[error("forward cache does not match the requested backward pass: {0}")]
    Cache(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("reliability diagram has no samples")]
    EmptyDiagram,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading a graph bundle. Line numbers are 1-based.
#[derive(Debug, Error)]
pub enum BundleError {
    #[error("missing bundle file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: malformed metadata: {detail}")]
    MalformedMeta { path: PathBuf, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{path}:{line}: node index {index} out of range (num_nodes = {num_nodes})")]
    IndexOutOfRange {
        path: PathBuf,
        line: usize,
        index: usize,
        num_nodes: usize,
    },

    #[error("{path}:{line}: label {label} out of range (num_classes = {num_classes})")]
    LabelOutOfRange {
        path: PathBuf,
        line: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("{path}: expected {expected} rows, found {found}")]
    RowCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("invalid bundle: {0}")]
    Invalid(String),
}
