use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {dimension} expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        dimension: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("empty tensor passed to {0}")]
    EmptyTensor(&'static str),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("node `{node}`: {message}")]
    NodeError { node: String, message: String },

    #[error("unsupported topology at `{node}`: {message}")]
    UnsupportedTopology { node: String, message: String },

    #[error("graph is not acyclic or not topologically sorted near `{0}`")]
    Cyclic(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("no calibration data for `{0}`")]
    MissingCalibration(String),

    #[error("missing energy statistics for `{0}`; calibrate with energy tracking enabled")]
    MissingEnergy(String),

    #[error("layer `{layer}` is not eligible for factorization: {reason}")]
    Ineligible { layer: String, reason: String },

    #[error("scale factor {value} for channel {channel} must be finite and positive")]
    NonPositiveFactor { channel: usize, value: f64 },

    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),

    #[error("not enough samples: need at least {required}, got {available}")]
    NotEnoughSamples { required: usize, available: usize },

    #[error("report mismatch: {0}")]
    ReportMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("missing tensor `{0}` in model manifest")]
    MissingTensor(String),

    #[error("checksum mismatch for {path}: manifest says {expected}, blob hashes to {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn node(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::NodeError {
            node: node.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error came from user-supplied configuration rather than
    /// a runtime failure. The CLI maps this onto its exit codes.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
