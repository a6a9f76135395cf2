//! Config file, flag resolution and exit-code mapping.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use deeptake::error::Error;
use deeptake::labeling::Task;
use deeptake::pipeline::NetworkOverrides;
use serde::Deserialize;

/// One JSON document; any flag given on the command line wins over its key.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub spec: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub window_s: Option<f64>,
    pub task: Option<Task>,
    pub seed: Option<u64>,
    pub smote_k: Option<usize>,
    pub ratios: Option<(f64, f64, f64)>,
    pub folds: Option<usize>,
    pub select_features: Option<bool>,
    pub network: NetworkOverrides,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }
}

/// Flag value, else config value, else a config error naming the flag.
pub fn required<T>(flag: Option<T>, config: Option<T>, name: &str) -> Result<T, Failure> {
    flag.or(config).ok_or_else(|| Failure::Config(format!("--{name} is required (flag or config key)")))
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Schema(String),
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Schema(_) => 4,
            Failure::Internal(_) => 1,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Schema(m) => write!(f, "schema error: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::InvalidSpec(_) | Error::InvalidConfig(_) | Error::InvalidCutoff { .. } | Error::InvalidFilter(_) => {
                Failure::Config(message)
            }
            Error::SchemaMismatch(_)
            | Error::DimensionMismatch { .. }
            | Error::ShapeMismatch(_)
            | Error::UnknownChannel(_)
            | Error::UnknownCategory { .. }
            | Error::Csv { .. }
            | Error::Json { .. } => Failure::Schema(message),
            _ => Failure::Data(message),
        }
    }
}

/// Output writes that fail are not the input's fault.
pub fn written(result: deeptake::error::Result<()>) -> Result<(), Failure> {
    result.map_err(|e| Failure::Internal(e.to_string()))
}
