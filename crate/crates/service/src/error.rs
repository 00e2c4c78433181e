use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use glytwin_core::domain::{DomainError, FieldError};
use serde::Serialize;

/// Error returned to HTTP clients.
#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("invalid request")]
    BadRequest(Vec<FieldError>),
    #[error("{0}")]
    Unprocessable(String),
    #[error("model not loaded")]
    Unavailable,
    #[error("{message}")]
    Internal { message: String, context: Vec<String> },
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'static str,
    message: String,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    fields: &'a [FieldError],
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    context: &'a [String],
}

impl ApiError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::BadRequest(vec![FieldError::new(field, message)])
    }

    /// 500 carrying the error and its source chain.
    pub fn internal(err: &(dyn std::error::Error + 'static)) -> Self {
        let mut context = Vec::new();
        let mut source = err.source();
        while let Some(s) = source {
            context.push(s.to_string());
            source = s.source();
        }
        ApiError::Internal {
            message: err.to_string(),
            context,
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Unprocessable(_) => "unprocessable",
            ApiError::Unavailable => "model_not_loaded",
            ApiError::Internal { .. } => "internal",
        }
    }
}

/// Field errors from sample validation become a 400; anything else is a
/// server fault.
impl From<DomainError> for ApiError {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::InvalidSample(fields) => ApiError::BadRequest(fields),
            other => ApiError::internal(&other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (fields, context): (&[FieldError], &[String]) = match &self {
            ApiError::BadRequest(f) => (f, &[]),
            ApiError::Internal { context, .. } => (&[], context),
            _ => (&[], &[]),
        };
        let body = ErrorBody {
            error: self.kind(),
            message: self.to_string(),
            fields,
            context,
        };
        (self.status(), Json(body)).into_response()
    }
}
