use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dimension mismatch in {op}: {message}")]
    Dimension { op: &'static str, message: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("config error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing ids ({count} total): {shown:?}")]
    MissingIds { count: usize, shown: Vec<u64> },

    #[error("crop failed: {0}")]
    Crop(String),

    #[error("insufficient overlap for scene {scene}: {found} < {required}")]
    Overlap {
        scene: String,
        found: usize,
        required: usize,
    },

    #[error("non-finite loss in scene {scene}: group={group}, con={con}")]
    NonFiniteLoss { scene: String, group: f64, con: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::EmptyInput(_) => "empty_input",
            Error::Dimension { .. } => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Precondition(_) => "precondition",
            Error::MissingIds { .. } => "missing_ids",
            Error::Crop(_) => "crop",
            Error::Overlap { .. } => "overlap",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn missing_ids(mut ids: Vec<u64>) -> Self {
        ids.sort_unstable();
        let count = ids.len();
        ids.truncate(10);
        Error::MissingIds { count, shown: ids }
    }
}
