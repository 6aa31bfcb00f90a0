use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dealer_core::engine::EngineError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("session `{0}` already exists")]
    DuplicateId(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session has already been started")]
    AlreadyStarted,
    #[error("session is still running ({remaining_ms} ms left)")]
    NotEnded { remaining_ms: u64 },
    #[error("missing or unknown token")]
    Unauthorized,
    #[error("{0}")]
    Forbidden(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("registry: {0}")]
    Registry(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Validation(_) => "validation",
            ServiceError::DuplicateId(_) => "duplicate_id",
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::AlreadyStarted => "already_started",
            ServiceError::NotEnded { .. } => "not_ended",
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::Forbidden(_) => "forbidden",
            ServiceError::Registry(_) => "internal",
            ServiceError::Engine(e) => match e {
                EngineError::UnknownMarket(_) => "unknown_market",
                EngineError::UnknownTrader(_) => "unknown_trader",
                EngineError::DuplicateTrader(_) => "duplicate_trader",
                EngineError::UnknownQuote(_) => "unknown_quote",
                EngineError::QuoteNotOpen { .. } => "quote_not_open",
                EngineError::QuoteExpired(_) => "quote_expired",
                EngineError::QuoteAlreadyOpen { .. } => "quote_already_open",
                EngineError::InvalidQuantity => "invalid_quantity",
                EngineError::InsufficientFunds { .. } => "insufficient_funds",
                EngineError::InsufficientShares { .. } => "insufficient_shares",
                EngineError::SessionClosed => "session_closed",
                EngineError::InvalidStatus { .. } => "invalid_status",
                EngineError::InvalidConfig(_) => "validation",
                _ => "internal",
            },
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            "validation" | "invalid_quantity" | "insufficient_funds" | "insufficient_shares" => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            "unknown_session" | "unknown_market" | "unknown_trader" | "unknown_quote" => StatusCode::NOT_FOUND,
            "unauthorized" => StatusCode::UNAUTHORIZED,
            "forbidden" => StatusCode::FORBIDDEN,
            "quote_expired" => StatusCode::GONE,
            "internal" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::CONFLICT,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
