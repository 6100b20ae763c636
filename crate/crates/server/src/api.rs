//! HTTP+JSON routes.
//!
//! - `GET  /health`
//! - `GET  /models`
//! - `GET  /models/{model}/layers`
//! - `POST /sessions?model=<id>` with the raw image bytes as body
//! - `POST /describe` `{session, layer, i, j}` or `{session, layer, pooled: true}`
//! - `POST /saliency` `{session, layer, query}`

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use featspeak::backbone::{LayerRef, Provenance};
use featspeak::explain::{heatmap_png, Explainer, HeatmapStyle, ALL_LAYERS};
use featspeak::image::ImageInput;
use featspeak::lm::GenerationConfig;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use uuid::Uuid;

use crate::config::{Registry, ServerSettings};
use crate::session::{Session, SessionStore};

pub struct AppState {
    pub registry: Registry,
    pub sessions: SessionStore,
    pub settings: ServerSettings,
}

impl AppState {
    pub fn new(registry: Registry, settings: ServerSettings) -> Self {
        Self {
            sessions: SessionStore::new(Duration::from_secs(settings.session_ttl_secs)),
            registry,
            settings,
        }
    }

    fn explainer(&self, model: &str) -> Result<&Arc<Explainer>, ApiError> {
        self.registry
            .get(model)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model `{model}`")))
    }

    fn session(&self, id: &str) -> Result<(Arc<Session>, Arc<Explainer>), ApiError> {
        let uuid = Uuid::parse_str(id).map_err(|_| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("`{id}` is not a session id"),
            )
        })?;
        let s = self
            .sessions
            .get(&uuid)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session `{id}`")))?;
        let ex = self.explainer(&s.model)?.clone();
        Ok((s, ex))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<featspeak::Error> for ApiError {
    fn from(e: featspeak::Error) -> Self {
        use featspeak::Error as E;
        let status = match &e {
            E::Bounds { .. } | E::Argument(_) | E::Configuration(_) | E::InvalidMask(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            E::Image(_) => StatusCode::BAD_REQUEST,
            E::State(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: &self.message,
            }),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let cors = if state.settings.cors_origins.is_empty() {
        CorsLayer::new().allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> = state
            .settings
            .cors_origins
            .iter()
            .filter_map(|o| HeaderValue::from_str(o).ok())
            .collect();
        CorsLayer::new().allow_origin(AllowOrigin::list(origins))
    }
    .allow_methods(Any)
    .allow_headers(Any);
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/models", get(models))
        .route("/models/{model}/layers", get(layers))
        .route("/sessions", post(create_session))
        .route("/describe", post(describe))
        .route("/saliency", post(saliency))
        .layer(DefaultBodyLimit::max(state.settings.max_upload_bytes))
        .layer(cors)
        .with_state(state)
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct LayerDescriptor {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct ModelInfo {
    pub id: String,
    pub backbone: String,
    pub language_model: String,
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<LayerDescriptor>,
}

fn layer_descriptors(ex: &Explainer) -> Vec<LayerDescriptor> {
    ex.backbone()
        .spec()
        .layers
        .iter()
        .map(|l| LayerDescriptor {
            name: l.layer.to_string(),
            height: l.dims.height,
            width: l.dims.width,
            channels: l.dims.channels,
        })
        .collect()
}

async fn models(State(st): State<Arc<AppState>>) -> Json<Vec<ModelInfo>> {
    Json(
        st.registry
            .ids()
            .filter_map(|id| st.registry.get(id).map(|ex| (id, ex)))
            .map(|(id, ex)| {
                let spec = ex.backbone().spec();
                ModelInfo {
                    id: id.clone(),
                    backbone: spec.model_id.clone(),
                    language_model: ex.language_model().model_id().to_string(),
                    input_height: spec.input_size.0,
                    input_width: spec.input_size.1,
                    layers: layer_descriptors(ex),
                }
            })
            .collect(),
    )
}

async fn layers(
    State(st): State<Arc<AppState>>,
    Path(model): Path<String>,
) -> ApiResult<Vec<LayerDescriptor>> {
    Ok(Json(layer_descriptors(st.explainer(&model)?)))
}

#[derive(Deserialize)]
pub struct SessionParams {
    pub model: Option<String>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct SessionCreated {
    pub session: String,
    pub model: String,
    pub height: usize,
    pub width: usize,
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    Query(params): Query<SessionParams>,
    body: axum::body::Bytes,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty upload"));
    }
    if body.len() > st.settings.max_upload_bytes {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("upload exceeds {} bytes", st.settings.max_upload_bytes),
        ));
    }
    let model =
        match params.model {
            Some(m) => m,
            None => st.registry.ids().next().cloned().ok_or_else(|| {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no models loaded")
            })?,
        };
    let ex = st.explainer(&model)?.clone();
    let st2 = st.clone();
    blocking(move || {
        let (h, w) = ex.backbone().spec().input_size;
        let image = ImageInput::decode(&body)
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("undecodable image: {e}")))?
            .fit(h, w)?;
        let s = st2.sessions.insert(Session::new(model.clone(), image));
        Ok((
            StatusCode::CREATED,
            Json(SessionCreated {
                session: s.id.to_string(),
                model,
                height: h,
                width: w,
            }),
        ))
    })
    .await
}

#[derive(Deserialize, Serialize, Debug, Clone, PartialEq)]
pub struct DescribeRequest {
    pub session: String,
    pub layer: String,
    #[serde(default)]
    pub i: Option<usize>,
    #[serde(default)]
    pub j: Option<usize>,
    #[serde(default)]
    pub pooled: bool,
    #[serde(default)]
    pub max_tokens: Option<usize>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct DescribeResponse {
    pub layer: String,
    pub provenance: Provenance,
    pub text: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub logprobs: Vec<f64>,
}

async fn describe(
    State(st): State<Arc<AppState>>,
    Json(req): Json<DescribeRequest>,
) -> ApiResult<DescribeResponse> {
    let (session, ex) = st.session(&req.session)?;
    blocking(move || {
        let cfg = GenerationConfig {
            max_tokens: req
                .max_tokens
                .unwrap_or(GenerationConfig::CAPTION.max_tokens),
        };
        let maps = session.features(&ex)?;
        let d = if req.pooled {
            if req.layer == ALL_LAYERS {
                ex.describe_all_layers_in(maps, &cfg)?
            } else {
                ex.describe_layer_in(maps, &LayerRef::new(req.layer.as_str()), &cfg)?
            }
        } else {
            let (Some(i), Some(j)) = (req.i, req.j) else {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "give a location `i`, `j` or set `pooled: true`",
                ));
            };
            ex.describe_location_in(maps, &LayerRef::new(req.layer.as_str()), i, j, &cfg)?
        };
        let tok = ex.language_model().tokenizer();
        Ok(Json(DescribeResponse {
            layer: d.layer.to_string(),
            provenance: d.provenance,
            text: d.text,
            tokens: d
                .tokens
                .iter()
                .map(|&t| tok.token(t).unwrap_or("<unk>").to_string())
                .collect(),
            token_ids: d.tokens,
            logprobs: d.token_log_probs,
        }))
    })
    .await
}

#[derive(Deserialize, Serialize, Debug, Clone, PartialEq)]
pub struct SaliencyRequest {
    pub session: String,
    pub layer: String,
    pub query: String,
    #[serde(default)]
    pub style: Option<HeatmapStyle>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct HeatmapImage {
    pub format: String,
    pub height: usize,
    pub width: usize,
    /// Base64 PNG.
    pub data: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct SaliencyResponse {
    pub layer: String,
    pub query: String,
    pub height: usize,
    pub width: usize,
    pub scores: Vec<Vec<f64>>,
    pub raw_min: f64,
    pub raw_max: f64,
    pub heatmap: HeatmapImage,
}

async fn saliency(
    State(st): State<Arc<AppState>>,
    Json(req): Json<SaliencyRequest>,
) -> ApiResult<SaliencyResponse> {
    if req.query.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "query is empty",
        ));
    }
    let (session, ex) = st.session(&req.session)?;
    blocking(move || {
        let maps = session.features(&ex)?;
        let s = ex.saliency_in(maps, &LayerRef::new(req.layer.as_str()), &req.query)?;
        let png = heatmap_png(&s.heatmap, req.style.unwrap_or(HeatmapStyle::Gray))?;
        Ok(Json(SaliencyResponse {
            layer: s.layer.to_string(),
            query: s.query,
            height: s.scores.height,
            width: s.scores.width,
            scores: s.scores.rows(),
            raw_min: s.raw_min,
            raw_max: s.raw_max,
            heatmap: HeatmapImage {
                format: "png".into(),
                height: s.heatmap.height,
                width: s.heatmap.width,
                data: base64::engine::general_purpose::STANDARD.encode(png),
            },
        }))
    })
    .await
}
