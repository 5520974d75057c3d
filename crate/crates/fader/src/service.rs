//! Stateless HTTP edit service.
//!
//! | route            | method | body                                   |
//! |------------------|--------|----------------------------------------|
//! | `/healthz`       | GET    | 200 once the checkpoint is loaded      |
//! | `/model/info`    | GET    | [`ModelInfo`]                          |
//! | `/edit`          | POST   | [`EditRequest`] → [`EditResponse`]     |
//! | `/strip`         | POST   | [`StripRequest`] → [`StripResponse`]   |
//!
//! Every route answers 503 until the model is ready. Errors carry
//! `{"error": ..., "field": ...}`.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::{to_bytes, Body};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use fader_core::checkpoint::Checkpoint;
use fader_core::evaluation::strip_from_codes;
use fader_core::imageio::{decode_image, tensor_to_png};
use fader_core::{AttributeCode, FaderModel, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub attribute_names: Vec<String>,
    pub n_attributes: usize,
    pub code_range: [f64; 2],
    pub image_size: usize,
    pub checkpoint_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    /// Base64-encoded image file.
    pub image: String,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    /// Base64-encoded PNG.
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripSpec {
    pub attr_index: usize,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripRequest {
    pub image: String,
    /// Values for every attribute; the strip attribute's entry is replaced per image.
    pub alphas: Vec<f64>,
    pub strip: StripSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripResponse {
    pub images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<&str>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                field: field.map(str::to_string),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub struct LoadedModel {
    pub model: FaderModel<f32>,
    pub info: ModelInfo,
}

impl LoadedModel {
    pub fn new(model: FaderModel<f32>, attribute_names: Vec<String>, step: u64) -> Self {
        let (lo, hi) = model.config.code_range();
        let info = ModelInfo {
            n_attributes: model.config.n_attributes,
            attribute_names,
            code_range: [lo, hi],
            image_size: model.config.image_size,
            checkpoint_step: step,
        };
        Self { model, info }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        let names = ck.header.attribute_names.clone();
        let step = ck.step();
        Self::new(ck.model, names, step)
    }
}

/// Shared, read-only after the model is set.
#[derive(Clone)]
pub struct ServiceState {
    slot: Arc<OnceLock<LoadedModel>>,
    body_limit: usize,
}

impl ServiceState {
    pub fn pending(body_limit: usize) -> Self {
        Self {
            slot: Arc::new(OnceLock::new()),
            body_limit,
        }
    }

    pub fn ready(model: LoadedModel, body_limit: usize) -> Self {
        let s = Self::pending(body_limit);
        s.set_model(model);
        s
    }

    /// Publishes the model; later calls are ignored.
    pub fn set_model(&self, model: LoadedModel) {
        let _ = self.slot.set(model);
    }

    fn loaded(&self) -> Result<&LoadedModel, ApiError> {
        self.slot
            .get()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded yet", None))
    }
}

pub fn router(state: ServiceState, cors_origin: &str) -> Router {
    let cors = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    let cors = match cors_origin {
        "*" => cors.allow_origin(Any),
        origin => match HeaderValue::from_str(origin) {
            Ok(v) => cors.allow_origin(v),
            Err(_) => cors,
        },
    };
    Router::new()
        .route("/healthz", get(healthz))
        .route("/model/info", get(model_info))
        .route("/edit", post(edit))
        .route("/strip", post(strip))
        .layer(DefaultBodyLimit::disable())
        .layer(cors)
        .with_state(state)
}

async fn healthz(State(state): State<ServiceState>) -> Result<&'static str, ApiError> {
    state.loaded().map(|_| "ok")
}

async fn model_info(State(state): State<ServiceState>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(state.loaded()?.info.clone()))
}

async fn read_json<T: DeserializeOwned>(body: Body, limit: usize) -> Result<T, ApiError> {
    let bytes = to_bytes(body, limit).await.map_err(|_| {
        ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("request body exceeds {limit} bytes"),
            None,
        )
    })?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}"), None))
}

fn decode_payload(image: &str, side: usize) -> Result<Tensor<f32>, ApiError> {
    let bad = |e: String| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e, Some("image"));
    let bytes = STANDARD
        .decode(image.trim())
        .map_err(|e| bad(format!("image is not valid base64: {e}")))?;
    decode_image(&bytes, side).map_err(|e| bad(format!("cannot decode image: {e}")))
}

fn check_alphas(alphas: &[f64], info: &ModelInfo, field: &str) -> Result<(), ApiError> {
    let [lo, hi] = info.code_range;
    if let Some((k, a)) = alphas.iter().enumerate().find(|(_, a)| !(**a >= lo && **a <= hi)) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("{field}[{k}] = {a} outside code range [{lo}, {hi}]"),
            Some(field),
        ));
    }
    Ok(())
}

fn check_code(alphas: &[f64], info: &ModelInfo) -> Result<(), ApiError> {
    if alphas.len() != info.n_attributes {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "alphas length mismatch", Some("alphas")));
    }
    check_alphas(alphas, info, "alphas")
}

fn internal(e: fader_core::FaderError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None)
}

fn render(model: &LoadedModel, image: &Tensor<f32>, codes: &[AttributeCode]) -> Result<Vec<String>, ApiError> {
    strip_from_codes(&model.model, image, codes)
        .map_err(internal)?
        .iter()
        .map(|t| tensor_to_png(t).map(|png| STANDARD.encode(png)).map_err(internal))
        .collect()
}

async fn edit(State(state): State<ServiceState>, body: Body) -> Result<Json<EditResponse>, ApiError> {
    let loaded = state.loaded()?;
    let req: EditRequest = read_json(body, state.body_limit).await?;
    let t = Instant::now();
    check_code(&req.alphas, &loaded.info)?;
    let image = decode_payload(&req.image, loaded.info.image_size)?;
    let code = AttributeCode::from_alphas(&req.alphas, loaded.model.config.code_range()).map_err(internal)?;
    let mut out = render(loaded, &image, &[code])?;
    tracing::info!(elapsed_ms = t.elapsed().as_secs_f64() * 1e3, "edit");
    Ok(Json(EditResponse { image: out.remove(0) }))
}

async fn strip(State(state): State<ServiceState>, body: Body) -> Result<Json<StripResponse>, ApiError> {
    let loaded = state.loaded()?;
    let req: StripRequest = read_json(body, state.body_limit).await?;
    let t = Instant::now();
    let info = &loaded.info;
    check_code(&req.alphas, info)?;
    if req.strip.attr_index >= info.n_attributes {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("attr_index {} out of range for {} attributes", req.strip.attr_index, info.n_attributes),
            Some("strip.attr_index"),
        ));
    }
    if req.strip.alphas.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "strip alphas must not be empty", Some("strip.alphas")));
    }
    check_alphas(&req.strip.alphas, info, "strip.alphas")?;
    let image = decode_payload(&req.image, info.image_size)?;
    let range = loaded.model.config.code_range();
    let codes = req
        .strip
        .alphas
        .iter()
        .map(|&a| {
            let mut v = req.alphas.clone();
            v[req.strip.attr_index] = a;
            AttributeCode::from_alphas(&v, range).map_err(internal)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let images = render(loaded, &image, &codes)?;
    tracing::info!(elapsed_ms = t.elapsed().as_secs_f64() * 1e3, n = images.len(), "strip");
    Ok(Json(StripResponse { images }))
}

/// Binds, reports the bound address through `on_bound`, loads the checkpoint
/// in the background and serves until interrupted.
pub async fn serve(
    checkpoint: std::path::PathBuf,
    host: &str,
    port: u16,
    cors_origin: &str,
    body_limit: usize,
    on_bound: impl FnOnce(std::net::SocketAddr),
) -> fader_core::Result<()> {
    // resolve the path up front so a missing checkpoint fails startup
    let path = fader_core::checkpoint::resolve(&checkpoint)?;
    if !path.is_file() {
        return Err(fader_core::FaderError::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .map_err(|e| fader_core::FaderError::io(format!("{host}:{port}"), e))?;
    let addr = listener.local_addr().map_err(|e| fader_core::FaderError::io(format!("{host}:{port}"), e))?;
    on_bound(addr);
    let state = ServiceState::pending(body_limit);
    let loader = state.clone();
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<String>();
    let load = tokio::task::spawn_blocking(move || Checkpoint::load(&path));
    tokio::spawn(async move {
        match load.await {
            Ok(Ok(ck)) => {
                tracing::info!(step = ck.step(), "checkpoint loaded");
                loader.set_model(LoadedModel::from_checkpoint(ck));
            }
            Ok(Err(e)) => {
                let _ = fail_tx.send(e.to_string());
            }
            Err(e) => {
                let _ = fail_tx.send(format!("checkpoint loader panicked: {e}"));
            }
        }
    });
    let failure = Arc::new(std::sync::Mutex::new(None));
    let failure_slot = failure.clone();
    axum::serve(listener, router(state, cors_origin))
        .with_graceful_shutdown(async move {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                Ok(msg) = fail_rx => *failure_slot.lock().expect("failure slot") = Some(msg),
            }
        })
        .await
        .map_err(|e| fader_core::FaderError::io(addr.to_string(), e))?;
    let failed = failure.lock().expect("failure slot").take();
    match failed {
        Some(msg) => Err(fader_core::FaderError::Checkpoint(msg)),
        None => Ok(()),
    }
}
