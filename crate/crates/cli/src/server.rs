//! HTTP relighting service.
//!
//! - `POST /relight`: multipart with `view*` PNG parts (reference first) and an
//!   `edits` JSON part; answers multipart with a `timing` JSON part and one
//!   `view<i>` PNG per input view.
//! - `GET /health`
//! - `GET /scenes`: dataset scenes with thumbnails and light positions.
//! - `POST /compose-gt`: ground-truth OLAT composition for a dataset scene.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use mvrelight_core::colorimetry::{encode_display, Lab};
use mvrelight_core::datagen::{LightCondition, LightState, OlatScene};
use mvrelight_core::lightmap::{EditsDoc, LightEdit};
use mvrelight_core::{Error, Image};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::multipart::{self, Part};
use crate::relighter::Relighter;

#[derive(Clone)]
pub struct AppState {
    pub relighter: Option<Arc<Relighter>>,
    pub scenes: Arc<Vec<OlatScene>>,
    limit: Arc<Semaphore>,
}

impl AppState {
    /// `max_concurrent` bounds simultaneous inference jobs.
    pub fn new(relighter: Option<Relighter>, scenes: Vec<OlatScene>, max_concurrent: usize) -> Self {
        Self {
            relighter: relighter.map(Arc::new),
            scenes: Arc::new(scenes),
            limit: Arc::new(Semaphore::new(max_concurrent.max(1))),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/relight", post(relight))
        .route("/scenes", get(scenes))
        .route("/compose-gt", post(compose_gt))
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Contract(_) | Error::Overlap { .. } | Error::Json(_) | Error::Image(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_ms: f64,
    pub views: usize,
    pub forward_passes: usize,
}

fn multipart_response(parts: &[Part]) -> Response {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    let boundary = format!("mvrelight-{:016x}", NEXT.fetch_add(1, Ordering::Relaxed) ^ 0x9e37_79b9_7f4a_7c15);
    let body = multipart::encode(parts, &boundary);
    ([(header::CONTENT_TYPE, multipart::content_type(&boundary))], body).into_response()
}

fn png_parts(images: &[Image]) -> ApiResult<Vec<Part>> {
    images.iter().enumerate().map(|(i, img)| Ok(Part::png(&format!("view{i}"), img.encode_png()?))).collect()
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    let model = s.relighter.as_ref().map(|r| {
        let (w, h) = r.image_dims();
        serde_json::json!({ "width": w, "height": h, "parameters": r.net().config().num_parameters(), "step": r.step })
    });
    Json(serde_json::json!({ "status": "ok", "model": model, "scenes": s.scenes.len() }))
}

async fn relight(State(s): State<AppState>, mut form: Multipart) -> ApiResult<Response> {
    let relighter = s
        .relighter
        .clone()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "no model is loaded".into()))?;
    let mut views = Vec::new();
    let mut edits: Option<EditsDoc> = None;
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad(format!("multipart: {e}")))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad(format!("multipart: {e}")))?;
        if name == "edits" {
            let text = std::str::from_utf8(&bytes).map_err(|_| ApiError::bad("edits part is not UTF-8"))?;
            edits = Some(EditsDoc::from_json(text)?);
        } else if name.starts_with("view") {
            views.push(Image::decode_png(&bytes).map_err(|e| ApiError::bad(format!("part {name}: {e}")))?);
        } else {
            return Err(ApiError::bad(format!("unexpected part {name:?}")));
        }
    }
    let edits = edits.ok_or_else(|| ApiError::bad("missing edits part"))?.edits;

    let permit = s.limit.clone().acquire_owned().await.map_err(|_| ApiError(StatusCode::SERVICE_UNAVAILABLE, "shutting down".into()))?;
    let n = views.len();
    let (relit, wall) = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let started = Instant::now();
        let out = relighter.relight(&views, &edits);
        (out, started.elapsed())
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("inference task: {e}")))?;
    let relit = relit?;

    let timing = Timing { wall_ms: wall.as_secs_f64() * 1e3, views: n, forward_passes: relit.forward_passes };
    let mut parts = vec![Part::json("timing", &serde_json::to_value(&timing).expect("timing serializes"))];
    parts.extend(png_parts(&relit.images)?);
    Ok(multipart_response(&parts))
}

#[derive(Serialize)]
struct LightPos {
    light: usize,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct CameraInfo {
    index: usize,
    width: usize,
    height: usize,
    /// Data URL of the all-lights-white composition.
    thumbnail: String,
    lights: Vec<LightPos>,
}

#[derive(Serialize)]
struct SceneInfo {
    id: String,
    num_lights: usize,
    cameras: Vec<CameraInfo>,
}

fn scene_info(scene: &OlatScene) -> mvrelight_core::Result<SceneInfo> {
    let white = LightCondition::all(scene.num_lights(), LightState::white());
    let cameras = (0..scene.num_cameras())
        .map(|c| {
            let img = encode_display(&scene.compose(c, &white)?, scene.exposure);
            let png = base64::engine::general_purpose::STANDARD.encode(img.encode_png()?);
            let lights = scene
                .visible_lights(c)
                .into_iter()
                .map(|k| {
                    let p = scene.projections[c][k];
                    LightPos { light: k, x: p.x, y: p.y }
                })
                .collect();
            Ok(CameraInfo { index: c, width: img.width(), height: img.height(), thumbnail: format!("data:image/png;base64,{png}"), lights })
        })
        .collect::<mvrelight_core::Result<_>>()?;
    Ok(SceneInfo { id: scene.id.clone(), num_lights: scene.num_lights(), cameras })
}

async fn scenes(State(s): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let scenes = s.scenes.clone();
    let infos = tokio::task::spawn_blocking(move || scenes.iter().map(scene_info).collect::<mvrelight_core::Result<Vec<_>>>())
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(serde_json::json!({ "scenes": infos })))
}

/// Lights default to white; each edit switches its light on with the given
/// colour or off.
#[derive(Debug, Deserialize)]
pub struct ComposeRequest {
    pub scene: String,
    pub cameras: Vec<usize>,
    #[serde(default)]
    pub edits: Vec<LightEdit>,
}

pub fn compose_gt_images(scene: &OlatScene, cameras: &[usize], edits: &[LightEdit]) -> mvrelight_core::Result<Vec<Image>> {
    if cameras.is_empty() {
        return Err(Error::Contract("at least one camera is required".into()));
    }
    let mut cond = LightCondition::all(scene.num_lights(), LightState::white());
    for e in edits {
        let slot = cond
            .lights
            .get_mut(e.light)
            .ok_or_else(|| Error::Contract(format!("light {} out of range for scene {}", e.light, scene.id)))?;
        *slot = if e.active { LightState::On { lab: Lab::from(e.lab) } } else { LightState::Off };
    }
    cameras.iter().map(|&c| Ok(encode_display(&scene.compose(c, &cond)?, scene.exposure))).collect()
}

async fn compose_gt(State(s): State<AppState>, Json(req): Json<ComposeRequest>) -> ApiResult<Response> {
    let scenes = s.scenes.clone();
    let images = tokio::task::spawn_blocking(move || {
        let scene = scenes
            .iter()
            .find(|sc| sc.id == req.scene)
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown scene {:?}", req.scene)))?;
        Ok::<_, ApiError>(compose_gt_images(scene, &req.cameras, &req.edits)?)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(multipart_response(&png_parts(&images)?))
}

pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
