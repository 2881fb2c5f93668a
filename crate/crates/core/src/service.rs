//! JSON-over-HTTP inference service.
//!
//! `GET /api/health`, `GET /api/sliders`, `POST /api/generate`. Errors are
//! `{code, message, field?}` with status 400 (validation), 404 (unknown
//! slider) or 500.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::engine::{SliderEngine, SliderInfo, SliderSetting};
use crate::error::Error;
use crate::image_io::encode_png;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    pub seed: u64,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub sliders: Vec<SliderSetting>,
    #[serde(default)]
    pub include_base: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    /// Base64 PNG of the edited image.
    pub image: String,
    pub is_base: bool,
    pub applied: Vec<SliderSetting>,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_image: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, field: Option<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), field } }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::UnknownSlider(_) => Self::new(StatusCode::NOT_FOUND, "unknown_slider", message, Some("sliders".into())),
            Error::UnknownCondition(_) => Self::new(StatusCode::BAD_REQUEST, "unknown_prompt", message, Some("prompt".into())),
            Error::InvalidArgument { field, .. } => Self::new(StatusCode::BAD_REQUEST, "invalid_argument", message, Some(field)),
            Error::DuplicateSlider(_) => Self::new(StatusCode::BAD_REQUEST, "duplicate_slider", message, Some("sliders".into())),
            Error::NonFinite(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_argument", message, None),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, None),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router(engine: Arc<SliderEngine>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sliders", get(sliders))
        .route("/api/generate", post(generate))
        .with_state(engine)
}

async fn health(State(engine): State<Arc<SliderEngine>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "sliders": engine.slider_names().len() }))
}

async fn sliders(State(engine): State<Arc<SliderEngine>>) -> Json<Vec<SliderInfo>> {
    Json(engine.catalog())
}

async fn generate(State(engine): State<Arc<SliderEngine>>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req: GenerateRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string(), None))?;
    let started = Instant::now();
    let result = tokio::task::spawn_blocking(move || -> Result<GenerateResponse, Error> {
        let out = engine.generate(&req.prompt, req.seed, req.steps, &req.sliders, req.include_base)?;
        Ok(GenerateResponse {
            image: STANDARD.encode(encode_png(&out.edited)?),
            is_base: out.is_base,
            applied: out.applied,
            elapsed_ms: 0,
            base_image: out.base.map(|b| encode_png(&b).map(|png| STANDARD.encode(png))).transpose()?,
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string(), None))?;
    let mut response = result?;
    response.elapsed_ms = started.elapsed().as_millis() as u64;
    Ok(Json(response))
}

/// Binds `host:port` and serves until Ctrl-C.
pub async fn serve(engine: Arc<SliderEngine>, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
