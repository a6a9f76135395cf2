use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate series: {0}")]
    DegenerateSeries(String),
    #[error("cutoff {cutoff_hz} Hz is not below Nyquist ({nyquist_hz} Hz)")]
    InvalidCutoff { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("invalid filter spec: {0}")]
    InvalidFilter(String),
    #[error("too few beats: found {found}, need at least {needed}")]
    TooFewBeats { found: usize, needed: usize },
    #[error("channel '{channel}' has insufficient history for a window starting at {t_start} s")]
    InsufficientHistory { channel: String, t_start: f64 },
    #[error("unknown channel '{0}'")]
    UnknownChannel(String),
    #[error("every column was dropped from the feature matrix")]
    EmptyMatrix,
    #[error("column '{0}' has no observed values")]
    AllMissingColumn(String),
    #[error("unknown category '{value}' for field '{field}'")]
    UnknownCategory { field: String, value: String },
    #[error("takeover time must be non-negative, got {0}")]
    NegativeTime(f64),
    #[error("lateral deviation must be non-negative, got {0}")]
    NegativeDeviation(f64),
    #[error("class '{class}' has {count} samples; SMOTE needs at least 2")]
    TooFewMinoritySamples { class: String, count: usize },
    #[error("need at least {needed} subject groups, found {found}")]
    TooFewGroups { found: usize, needed: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("partition '{0}' is empty")]
    EmptyPartition(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("training data contains a single class")]
    SingleClassData,
    #[error("prediction set is empty")]
    EmptyPredictions,
    #[error("invalid session spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
