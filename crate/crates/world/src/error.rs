use std::io;
use std::path::PathBuf;

use flowplan_core::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("invalid prompt {tokens:?}: {reason}")]
    InvalidPrompt { tokens: Vec<u8>, reason: String },
    #[error("{what}: expected shape {expected:?}, got {found:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0} exists and is not empty (use --force to overwrite)")]
    OutputNotEmpty(PathBuf),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("benchmark needs at least {needed} candidate pairs, got {found}")]
    TooFewCandidates { needed: usize, found: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl WorldError {
    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(io::Error) -> Self + '_ {
        move |source| WorldError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
