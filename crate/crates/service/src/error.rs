use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] shoeprint_core::Error),

    #[error("{field} is not a decodable image: {message}")]
    BadImage { field: String, message: String },

    #[error("missing multipart field {0}")]
    MissingField(&'static str),

    #[error("upload exceeds the {limit}-byte limit")]
    TooLarge { limit: usize },

    #[error("unknown model {0:?}")]
    UnknownModel(String),

    #[error("no model is loaded")]
    NoModel,

    #[error("unknown job {0}")]
    UnknownJob(String),

    #[error("unknown metric {0:?}")]
    UnknownMetric(String),

    #[error("no population data for scenario {0}")]
    MissingPopulation(String),

    #[error("job queue is full")]
    QueueFull,

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Core(e) => e.code(),
            ServiceError::BadImage { .. } => "BadImageError",
            ServiceError::MissingField(_) => "MissingFieldError",
            ServiceError::TooLarge { .. } => "PayloadTooLargeError",
            ServiceError::UnknownModel(_) | ServiceError::NoModel => "UnknownModelError",
            ServiceError::UnknownJob(_) => "UnknownJobError",
            ServiceError::UnknownMetric(_) => "UnknownMetricError",
            ServiceError::MissingPopulation(_) => "MissingPopulationError",
            ServiceError::QueueFull => "QueueFullError",
            ServiceError::BadRequest(_) => "BadRequestError",
            ServiceError::Io(_) => "IOError",
            ServiceError::Json(_) => "FormatError",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadImage { .. } | ServiceError::MissingField(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::UnknownModel(_)
            | ServiceError::NoModel
            | ServiceError::UnknownJob(_)
            | ServiceError::UnknownMetric(_)
            | ServiceError::MissingPopulation(_) => StatusCode::NOT_FOUND,
            ServiceError::QueueFull => StatusCode::TOO_MANY_REQUESTS,
            ServiceError::Core(_) | ServiceError::Io(_) | ServiceError::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// The `{"error": {"code", "message"}}` body shared by the API and the CLI.
    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "code": self.code(), "message": self.to_string() } })
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.to_json())).into_response()
    }
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
