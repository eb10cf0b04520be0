use thiserror::Error;

use crate::drl::TrainHistory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("degenerate model: {0}")]
    Degenerate(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Training {
        epoch: usize,
        message: String,
        history: Box<TrainHistory>,
    },
    #[error("search failed: {0}")]
    Search(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag used by the CLI for machine-parsable failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
            Error::Split(_) => "split",
            Error::Degenerate(_) => "degenerate",
            Error::Training { .. } => "training",
            Error::Search(_) => "search",
            Error::Io(_) => "io",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
