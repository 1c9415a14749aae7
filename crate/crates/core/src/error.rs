use std::path::PathBuf;

use thiserror::Error;

/// A rejected input row: 1-based line number plus what was wrong with it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("{count} malformed row(s); first: {first}")]
    Rows { count: usize, first: RowError },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("autodiff: {0}")]
    Graph(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("model: {0}")]
    Model(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name, used by the CLI status line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Schema(_) | Error::Rows { .. } | Error::Json(_) => "input",
            Error::Config(_) => "config",
            Error::Shape { .. } | Error::Graph(_) => "numeric",
            Error::Data(_) => "data",
            Error::Model(_) | Error::Checkpoint(_) => "model",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
