use std::path::PathBuf;

/// Errors surfaced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty attention row {row}")]
    EmptyAttentionRow { row: usize },
    #[error("degenerate feature vector at row {row}")]
    DegenerateFeature { row: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite objective at perturbation of {input}[{index}]")]
    NonFiniteProbe { input: String, index: usize },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("vocab overflow: token {token} at position {position} >= vocab {vocab}")]
    VocabOverflow { token: usize, position: usize, vocab: usize },
    #[error("invalid condition id {condition} (classes = {classes})")]
    InvalidCondition { condition: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss component {component}")]
    NonFiniteLoss { component: &'static str },
    #[error("config mismatch on field {field}: expected {expected}, found {found}")]
    ConfigMismatch { field: String, expected: String, found: String },
    #[error("checksum failure in {path}")]
    Checksum { path: PathBuf },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
