//! Wire types and the error body shared by every endpoint.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use nsd_core::imaging::Letterbox;
use nsd_core::layout::{LayoutError, SizeStrategy};
use serde::{Deserialize, Serialize};

/// JSON form of a generation request. `layout` may be the document itself
/// or its serialized text.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateJson {
    /// Base64-encoded PNG or JPEG bytes.
    pub background: String,
    pub layout: serde_json::Value,
    #[serde(default)]
    pub latent_seed: Option<u64>,
    #[serde(default)]
    pub size_strategy: Option<SizeStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    /// Base64-encoded PNG of the square model canvas.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub latency_ms: f64,
    pub model_id: String,
    pub request_id: String,
    pub latent_seed: u64,
    /// Placement of the background on the canvas:
    /// `canvas = scale * source + offset`.
    pub transform: Letterbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassesResponse {
    pub classes: Vec<ClassEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub ready: bool,
    pub model_id: Option<String>,
    pub uptime_s: f64,
    pub queue_depth: usize,
    pub queue_capacity: usize,
    /// Set when loading the model failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    /// Request field at fault, as a dotted path such as
    /// `layout.objects[2].class`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), field: None } }
    }

    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        let mut e = Self::new(StatusCode::BAD_REQUEST, "invalid_request", message);
        e.body.field = Some(field.into());
        e
    }

    pub fn too_large(message: impl Into<String>) -> Self {
        Self::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", message)
    }

    pub fn not_ready() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "not_ready", "the model is not loaded yet")
    }

    pub fn queue_full() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "queue_full", "the generation queue is full")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    /// A layout error, located under the `layout` field.
    pub fn layout(err: &LayoutError) -> Self {
        let field = match err {
            LayoutError::Parse { path, .. } if path == "$" || path == "." => "layout".to_string(),
            LayoutError::Parse { path, .. } => format!("layout.{path}"),
            LayoutError::Version { .. } => "layout.version".to_string(),
            _ => "layout".to_string(),
        };
        let message = match err {
            LayoutError::Parse { message, .. } => message.clone(),
            other => other.to_string(),
        };
        let mut e = Self::invalid(field, message);
        e.body.code = "invalid_layout".into();
        e
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorResponse { error: self.body })).into_response()
    }
}

/// Field named by a serde "missing field `x`" message.
pub(crate) fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}
