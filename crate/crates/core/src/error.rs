use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NilmError>;

#[derive(Debug, Error)]
pub enum NilmError {
    #[error("invalid time series: {0}")]
    InvalidSeries(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate channel {0} in labels file")]
    DuplicateChannel(u32),

    #[error("channel {channel} ({label}) does not overlap the mains in time")]
    NoOverlap { channel: u32, label: String },

    #[error("gap of {gap_steps} steps exceeds the limit of {limit} steps at epoch {epoch}")]
    GapTooLong { gap_steps: usize, limit: usize, epoch: i64 },

    #[error("building {building} has no {appliance} channel")]
    MissingAppliance { building: u32, appliance: String },

    #[error("training set contains a single class")]
    SingleClass,

    #[error("training diverged: non-finite {0}")]
    Diverged(&'static str),

    #[error("SMO did not converge after {iterations} iterations ({violations} KKT violations remain)")]
    NotConverged { iterations: usize, violations: usize },

    #[error("feature space mismatch: model expects {expected}, input is {actual}")]
    FeatureSpaceMismatch { expected: String, actual: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl NilmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NilmError::Io {
            path: path.into(),
            source,
        }
    }
}
