use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

use cyclodet_core::labelstore::{DatasetError, LabelError};

/// Error body: `{"error": "..."}`. The store version travels in the response header.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<LabelError> for ApiError {
    fn from(e: LabelError) -> Self {
        let msg = e.to_string();
        match e {
            LabelError::NotFound(_) => ApiError::NotFound(msg),
            LabelError::IllegalTransition { .. } | LabelError::SelfReview { .. } | LabelError::Locked(_) => {
                ApiError::Conflict(msg)
            }
            LabelError::MissingNote | LabelError::EmptyActor => ApiError::BadRequest(msg),
            LabelError::InvalidBox(_) => ApiError::Unprocessable(msg),
            LabelError::CorruptJournal { .. } | LabelError::Io(_) | LabelError::Json(_) => ApiError::Internal(msg),
        }
    }
}

impl From<DatasetError> for ApiError {
    fn from(e: DatasetError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let ApiError::Internal(msg) = &self {
            log::error!("{msg}");
        }
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}
