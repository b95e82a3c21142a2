use std::path::PathBuf;

use thiserror::Error;

use crate::data::QueryId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("query {0} has {1} documents, above the exact enumeration cap of {2}; use monte carlo")]
    EnumerationCap(QueryId, usize, usize),

    #[error("invalid ranking for query {query}: {reason}")]
    InvalidRanking { query: QueryId, reason: String },

    #[error("logging exposure is zero for query {query} doc {doc} where the target places mass")]
    SupportViolation { query: QueryId, doc: usize },

    #[error("clicked document {doc} of query {query} has zero propensity")]
    ZeroPropensity { query: QueryId, doc: usize },

    #[error("query {0} does not appear in the click log")]
    UnseenQuery(QueryId),

    #[error("query {0} is not in the dataset")]
    UnknownQuery(QueryId),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
