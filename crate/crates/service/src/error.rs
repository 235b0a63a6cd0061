use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use memgrain_core::MemError;
use serde::Serialize;
use serde_json::Value;

/// Error body: `{code, message, detail?}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into(), detail: None }
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", message)
    }

    pub fn unauthorized() -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }

    pub fn no_route() -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

/// The one (status, code) pair for each engine error.
pub fn classify(e: &MemError) -> (StatusCode, &'static str) {
    use StatusCode as S;
    match e {
        MemError::Batch { source, .. } => classify(source),
        MemError::EmptyContent => (S::UNPROCESSABLE_ENTITY, "empty_content"),
        MemError::UnknownType(_) => (S::UNPROCESSABLE_ENTITY, "unknown_type"),
        MemError::ClockOutOfRange(_) => (S::UNPROCESSABLE_ENTITY, "clock_out_of_range"),
        MemError::DimensionMismatch { .. } => (S::UNPROCESSABLE_ENTITY, "dimension_mismatch"),
        MemError::DegenerateEmbedding => (S::UNPROCESSABLE_ENTITY, "degenerate_embedding"),
        MemError::InvalidNamespace(_) => (S::UNPROCESSABLE_ENTITY, "invalid_namespace"),
        MemError::InvalidParams(_) => (S::UNPROCESSABLE_ENTITY, "invalid_params"),
        MemError::InvalidRange(_) => (S::UNPROCESSABLE_ENTITY, "invalid_range"),
        MemError::FutureDate(_) => (S::UNPROCESSABLE_ENTITY, "future_date"),
        MemError::NotFound(_) => (S::NOT_FOUND, "not_found"),
        MemError::IllegalTransition(_) => (S::CONFLICT, "illegal_transition"),
        MemError::AlreadyResolved(_) => (S::CONFLICT, "already_resolved"),
        MemError::ExternalUnavailable(_) => (S::SERVICE_UNAVAILABLE, "external_unavailable"),
        MemError::LlmUnavailable(_) => (S::SERVICE_UNAVAILABLE, "llm_unavailable"),
        MemError::InvalidConfig(_) => (S::INTERNAL_SERVER_ERROR, "invalid_config"),
        MemError::StorageFailure(_) => (S::INTERNAL_SERVER_ERROR, "storage_failure"),
        MemError::CorruptLog { .. } => (S::INTERNAL_SERVER_ERROR, "corrupt_log"),
    }
}

impl From<MemError> for ApiError {
    fn from(e: MemError) -> Self {
        let (status, code) = classify(&e);
        let detail = match e.root() {
            MemError::DimensionMismatch { expected, actual } => {
                Some(serde_json::json!({ "expected": expected, "actual": actual }))
            }
            MemError::CorruptLog { seq, .. } => Some(serde_json::json!({ "seq": seq })),
            _ => None,
        };
        ApiError { status, code, message: e.to_string(), detail }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        crate::canonical_response(self.status, &self)
    }
}
