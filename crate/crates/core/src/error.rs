use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: derivation does not reproduce candidate tokens")]
    DerivationMismatch { path: PathBuf, line: usize },
    #[error("{path}:{line}: expected {expected} features, found {found}")]
    FeatureCount { path: PathBuf, line: usize, expected: usize, found: usize },
    #[error("expected {expected} lambda weights, found {found}")]
    LambdaLength { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line search failed after {evaluations} evaluations")]
    LineSearch { evaluations: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
