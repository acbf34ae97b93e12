//! Annotation web service: registered annotators, sessions, revisioned
//! annotation submission with correction mode, dashboard analytics and
//! corpus export, backed by an append-only JSONL store.

pub mod api;
pub mod store;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use thiserror::Error;

pub use api::{router, serve};
pub use store::Store;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("region {index} is invalid: {message}")]
    InvalidRegion { index: usize, message: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("missing or unknown bearer token")]
    Unauthorized,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("store log line {line} is corrupt: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] mslayout_core::corpus::CorpusError),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Validation(_) | ServiceError::InvalidRegion { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::Forbidden(_) => StatusCode::FORBIDDEN,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::CorruptLog { .. } | ServiceError::Io { .. } | ServiceError::Corpus(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let mut body = serde_json::json!({ "error": self.to_string() });
        if let ServiceError::InvalidRegion { index, .. } = &self {
            body["region_index"] = (*index).into();
        }
        (self.status(), Json(body)).into_response()
    }
}
