use thiserror::Error;

pub type Result<T, E = MemError> = std::result::Result<T, E>;

/// Every failure the engine can report. The service layer maps each variant
/// onto exactly one HTTP status and machine code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemError {
    #[error("content has no alphanumeric tokens")]
    EmptyContent,
    #[error("embedding of {index}-th text failed: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<MemError>,
    },
    #[error("unknown memory type `{0}`")]
    UnknownType(String),
    #[error("clock value {0} does not fit in 48 bits")]
    ClockOutOfRange(u64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("token contributions cancel out; embedding has zero norm")]
    DegenerateEmbedding,
    #[error("invalid embedder configuration: {0}")]
    InvalidConfig(String),
    #[error("external embedding service unavailable: {0}")]
    ExternalUnavailable(String),
    #[error("language model unavailable: {0}")]
    LlmUnavailable(String),
    #[error("invalid namespace `{0}`")]
    InvalidNamespace(String),
    #[error("invalid retrieval parameters: {0}")]
    InvalidParams(String),
    #[error("invalid time range: {0}")]
    InvalidRange(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("illegal transition: {0}")]
    IllegalTransition(String),
    #[error("conflict {0} is already resolved")]
    AlreadyResolved(String),
    #[error("date {0} is in the future")]
    FutureDate(String),
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("corrupt log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
}

impl MemError {
    /// Unwraps batch context to the underlying cause.
    pub fn root(&self) -> &MemError {
        match self {
            MemError::Batch { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for MemError {
    fn from(e: std::io::Error) -> Self {
        MemError::StorageFailure(e.to_string())
    }
}
