//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset root does not exist or is not a directory: {0}")]
    MissingRoot(PathBuf),
    #[error("class directory holds no images: {0}")]
    EmptyClass(PathBuf),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("image decode failed for {path}: {source}")]
    DecodeError {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("class index {index} out of range for {num_classes} classes")]
    IndexOutOfRange { index: usize, num_classes: usize },
    #[error("class {class} would receive zero {side} samples at fraction {fraction}")]
    DegenerateClass {
        class: String,
        side: &'static str,
        fraction: f64,
    },
    #[error("unknown class name: {0}")]
    UnknownClass(String),
    #[error("pretrained weights unavailable for {family}/{variant}: {reason}")]
    WeightsUnavailable {
        family: String,
        variant: String,
        reason: String,
    },
    #[error("input size {height}x{width} unsupported for {family}: {reason}")]
    UnsupportedInputSize {
        family: String,
        height: usize,
        width: usize,
        reason: String,
    },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("only one label value present; AUC undefined")]
    SingleClass,
    #[error("singular system in surrogate fit (rank-deficient with zero ridge)")]
    SingularSystem,
    #[error("branch dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite loss at epoch {epoch}: {value}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("data stream exhausted before the requested batch")]
    StreamExhausted,
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("checkpoint corrupt: {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("weight store hash mismatch for {path}: manifest {expected}, file {actual}")]
    WeightHashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error at {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 missing prerequisite,
    /// 4 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::IndexOutOfRange { .. }
            | Error::UnknownClass(_)
            | Error::MissingRoot(_) => 2,
            Error::MissingPrerequisite(_)
            | Error::MissingCheckpoint(_)
            | Error::WeightsUnavailable { .. } => 3,
            _ => 4,
        }
    }
}
