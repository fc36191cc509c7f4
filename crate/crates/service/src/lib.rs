//! HTTP front end for the decoration generator.
//!
//! `POST /v1/generate` accepts JSON (base64 background) or multipart
//! uploads; `GET /v1/classes`, `/v1/health` and `/v1/spec` describe the
//! service. Generation runs on one worker thread fed by a bounded queue.

pub mod api;
pub mod engine;
pub mod openapi;

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::{ImageFormat, ImageReader, RgbImage};
use nsd_core::inference::{prepare_background, resolve_layout};
use nsd_core::layout::{ClassVocabulary, Geometry, SizeStrategy};
use tokio::net::TcpListener;

use crate::api::{
    missing_field, ApiError, ClassEntry, ClassesResponse, GenerateJson, GenerateResponse, HealthResponse,
};
use crate::engine::{Engine, Job, LoadedModel};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_body_bytes: usize,
    /// Largest decoded background, in pixels.
    pub max_pixels: u64,
    pub queue_capacity: usize,
    pub vocab: ClassVocabulary,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_body_bytes: 16 << 20,
            max_pixels: 40_000_000,
            queue_capacity: 16,
            vocab: ClassVocabulary::default(),
        }
    }
}

pub struct AppState {
    pub engine: Engine,
    pub config: ServiceConfig,
    started: Instant,
    next_request: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let engine = Engine::start(config.vocab.clone(), config.queue_capacity);
        Arc::new(Self { engine, config, started: Instant::now(), next_request: AtomicU64::new(1) })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/classes", get(classes))
        .route("/v1/health", get(health))
        .route("/v1/spec", get(openapi_document))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Loads `checkpoint` in the background so that the service answers
/// health checks while the model is still being read.
pub fn spawn_loader(state: Arc<AppState>, checkpoint: PathBuf) -> tokio::task::JoinHandle<()> {
    tokio::task::spawn_blocking(move || match LoadedModel::from_checkpoint(&checkpoint, state.engine.vocab()) {
        Ok(model) => {
            log::info!("loaded {} ({})", checkpoint.display(), model.model_id);
            if let Err(e) = state.engine.install(model) {
                state.engine.fail(e);
            }
        }
        Err(e) => {
            log::error!("loading {} failed: {e}", checkpoint.display());
            state.engine.fail(e.to_string());
        }
    })
}

/// Serves on `addr` until interrupted.
pub async fn serve(addr: SocketAddr, config: ServiceConfig, checkpoint: PathBuf) -> std::io::Result<()> {
    let state = AppState::new(config);
    let listener = TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    spawn_loader(state.clone(), checkpoint);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn classes(State(state): State<Arc<AppState>>) -> Json<ClassesResponse> {
    let vocab = state.engine.vocab();
    let classes = vocab
        .names()
        .iter()
        .enumerate()
        .map(|(id, name)| ClassEntry { id, name: name.clone(), color: vocab.color(id).unwrap_or([255, 255, 255]) })
        .collect();
    Json(ClassesResponse { classes })
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    let e = &state.engine;
    Json(HealthResponse {
        ready: e.model().is_some(),
        model_id: e.model().map(|m| m.model_id.clone()),
        uptime_s: state.started.elapsed().as_secs_f64(),
        queue_depth: e.queue_depth(),
        queue_capacity: e.capacity(),
        error: e.load_error(),
    })
}

async fn openapi_document() -> Json<serde_json::Value> {
    Json(openapi::document())
}

/// A request before validation, whichever encoding it arrived in.
struct RawRequest {
    background: Vec<u8>,
    layout: String,
    latent_seed: Option<u64>,
    size_strategy: Option<SizeStrategy>,
}

async fn read_request(req: Request) -> Result<RawRequest, ApiError> {
    let content_type = req.headers().get(CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
    if content_type.starts_with("multipart/form-data") {
        let mp = Multipart::from_request(req, &()).await.map_err(|e| ApiError::invalid("$", e.body_text()))?;
        return read_multipart(mp).await;
    }
    if !content_type.is_empty() && !content_type.starts_with("application/json") {
        return Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_media_type",
            format!("expected application/json or multipart/form-data, got {content_type}"),
        ));
    }
    let body = Bytes::from_request(req, &()).await.map_err(|e| match e.status() {
        StatusCode::PAYLOAD_TOO_LARGE => ApiError::too_large(e.body_text()),
        _ => ApiError::invalid("$", e.body_text()),
    })?;
    let de = &mut serde_json::Deserializer::from_slice(&body);
    let parsed: GenerateJson = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let field = match missing_field(&message) {
            Some(f) => f.to_string(),
            None if path == "." => "$".to_string(),
            None => path,
        };
        ApiError::invalid(field, message)
    })?;
    let background =
        B64.decode(parsed.background.trim()).map_err(|e| ApiError::invalid("background", format!("invalid base64: {e}")))?;
    let layout = match parsed.layout {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    };
    Ok(RawRequest { background, layout, latent_seed: parsed.latent_seed, size_strategy: parsed.size_strategy })
}

async fn read_multipart(mut mp: Multipart) -> Result<RawRequest, ApiError> {
    let part_error = |e: axum::extract::multipart::MultipartError| match e.status() {
        StatusCode::PAYLOAD_TOO_LARGE => ApiError::too_large(e.body_text()),
        _ => ApiError::invalid("$", e.body_text()),
    };
    let (mut background, mut layout, mut latent_seed, mut size_strategy) = (None, None, None, None);
    while let Some(field) = mp.next_field().await.map_err(part_error)? {
        let name = field.name().unwrap_or("").to_string();
        match name.as_str() {
            "background" => background = Some(field.bytes().await.map_err(part_error)?.to_vec()),
            "layout" => layout = Some(field.text().await.map_err(part_error)?),
            "latent_seed" => {
                let text = field.text().await.map_err(part_error)?;
                latent_seed = Some(
                    text.trim()
                        .parse::<u64>()
                        .map_err(|e| ApiError::invalid("latent_seed", format!("expected an unsigned integer: {e}")))?,
                );
            }
            "size_strategy" => {
                let text = field.text().await.map_err(part_error)?;
                size_strategy = Some(text.trim().parse().map_err(|e: String| ApiError::invalid("size_strategy", e))?);
            }
            other => return Err(ApiError::invalid(other, format!("unknown field `{other}`"))),
        }
    }
    Ok(RawRequest {
        background: background.ok_or_else(|| ApiError::invalid("background", "missing field `background`"))?,
        layout: layout.ok_or_else(|| ApiError::invalid("layout", "missing field `layout`"))?,
        latent_seed,
        size_strategy,
    })
}

fn decode_background(bytes: &[u8], max_pixels: u64) -> Result<RgbImage, ApiError> {
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| ApiError::invalid("background", e.to_string()))?;
    if !matches!(reader.format(), Some(ImageFormat::Png | ImageFormat::Jpeg)) {
        return Err(ApiError::invalid("background", "expected PNG or JPEG bytes"));
    }
    let (w, h) = reader.into_dimensions().map_err(|e| ApiError::invalid("background", e.to_string()))?;
    if w as u64 * h as u64 > max_pixels {
        return Err(ApiError::too_large(format!("background is {w}x{h}, above the {max_pixels}-pixel limit")));
    }
    let img = image::load_from_memory(bytes).map_err(|e| ApiError::invalid("background", e.to_string()))?;
    Ok(img.to_rgb8())
}

async fn generate(State(state): State<Arc<AppState>>, req: Request) -> Result<Json<GenerateResponse>, ApiError> {
    let start = Instant::now();
    let raw = read_request(req).await?;
    let model = state.engine.model().cloned().ok_or_else(ApiError::not_ready)?;
    let vocab = state.engine.vocab();
    let size = model.image_size();

    let img = decode_background(&raw.background, state.config.max_pixels)?;
    let (background, transform) = prepare_background(&img, size);
    let strategy = raw.size_strategy.unwrap_or_default();
    let defaults = match (strategy, &model.size_stats) {
        (SizeStrategy::Gt, _) | (_, None) => None,
        (s, Some(stats)) => Some((stats, s)),
    };
    let layout = resolve_layout(&raw.layout, vocab, defaults, &transform).map_err(|e| match e {
        nsd_core::Error::Layout(le) => ApiError::layout(&le),
        other => {
            let mut err = ApiError::invalid("layout.canvas", other.to_string());
            err.body.code = "invalid_layout".into();
            err
        }
    })?;
    for (i, o) in layout.objects.iter().enumerate() {
        if let Geometry::Box(b) = o.geometry {
            b.clipped(size, size).map_err(|e| {
                let mut err = ApiError::invalid(format!("layout.objects[{i}].box"), e.to_string());
                err.body.code = "invalid_layout".into();
                err
            })?;
        }
    }

    let latent_seed = raw.latent_seed.unwrap_or(0);
    let out = state.engine.submit(Job { background, layout, latent_seed, transform }).await?;
    let rgb = out.to_rgb();
    let mut png = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut png), ImageFormat::Png).map_err(|e| ApiError::internal(e.to_string()))?;
    let id = state.next_request.fetch_add(1, Ordering::SeqCst);
    Ok(Json(GenerateResponse {
        image: B64.encode(&png),
        width: rgb.width(),
        height: rgb.height(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        model_id: model.model_id.clone(),
        request_id: format!("req-{id:08}"),
        latent_seed,
        transform,
    }))
}
