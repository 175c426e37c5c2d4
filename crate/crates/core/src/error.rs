use std::path::PathBuf;

/// Errors produced by the detection library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid interval [{start}, {end}): end must exceed start and both must be finite")]
    InvalidInterval { start: f64, end: f64 },

    #[error("invalid pyramid layout: {0}")]
    Layout(String),

    #[error("anchor-free slots have no regression encoding")]
    AnchorFreeEncode,

    #[error("infeasible event packing: {0}")]
    InfeasiblePacking(String),

    #[error("invalid dataset config: {0}")]
    DatasetConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed feature file {path}: {message}")]
    FeatureFile { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid network config: {0}")]
    NetworkConfig(String),

    #[error("confidence branch is not enabled in this network")]
    NoConfidenceBranch,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("unknown video `{0}`")]
    UnknownVideo(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
