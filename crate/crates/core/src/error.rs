use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HmmError>;

#[derive(Debug, Error)]
pub enum HmmError {
    /// Caller supplied arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("degenerate state {state}: total posterior mass {mass:e} below threshold")]
    DegenerateState { state: usize, mass: f64 },

    #[error("nothing to forecast: history length {history} leaves no future steps for a model with {n_states} states")]
    NothingToForecast { history: usize, n_states: usize },

    #[error("parse error in {}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<HmmError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HmmError {
    pub fn usage(msg: impl Into<String>) -> Self {
        HmmError::Usage(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        HmmError::InvalidModel(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        HmmError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a caller mistake rather than bad data or a bad model.
    pub fn is_usage(&self) -> bool {
        match self {
            HmmError::Usage(_) => true,
            HmmError::Context { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
