//! Local HTTP service for interactive annotation: image listing, box
//! refinement through a loaded checkpoint, and a durable label store.
//!
//! Routes:
//! - `GET /health`
//! - `GET /images?page=&per_page=`, `GET /images/{id}`
//! - `POST /refine`
//! - `POST /labels`, `GET /labels?image=`, `DELETE /labels/{id}`

mod catalog;
mod store;

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, oneshot};
use tower_http::cors::CorsLayer;

use tightbox_core::dataset::{LabelSource, SampleConfig, SourceImage};
use tightbox_core::geometry::BBox;
use tightbox_core::model::{refine, CheckpointMeta, ModelError, Regressor};

pub use catalog::{ImageCatalog, ImageEntry};
pub use store::{LabelStore, StoreError, StoredLabel};

pub const DEFAULT_PORT: u16 = 8321;
pub const DEFAULT_QUEUE_DEPTH: usize = 32;
/// Smallest rough box area /refine accepts, in px².
pub const MIN_REFINE_AREA: f64 = 16.0;
const DEFAULT_PER_PAGE: usize = 50;
const COORDINATES: &str =
    "pixels; origin at the top-left image corner; x right, y down; boxes [x_min, y_min, x_max, y_max] on pixel boundaries";

struct RefineJob {
    image: Arc<SourceImage>,
    rough: BBox,
    reply: oneshot::Sender<Result<BBox, ModelError>>,
}

struct Engine {
    meta: CheckpointMeta,
    jobs: mpsc::Sender<RefineJob>,
}

/// Shared service state. The model slot is filled once, after which the
/// model is read-only.
pub struct AppState {
    catalog: ImageCatalog,
    labels: LabelStore,
    engine: OnceLock<Engine>,
    queue_depth: usize,
}

impl AppState {
    pub fn new(catalog: ImageCatalog, labels: LabelStore) -> Self {
        Self::with_queue_depth(catalog, labels, DEFAULT_QUEUE_DEPTH)
    }

    pub fn with_queue_depth(catalog: ImageCatalog, labels: LabelStore, queue_depth: usize) -> Self {
        Self {
            catalog,
            labels,
            engine: OnceLock::new(),
            queue_depth: queue_depth.max(1),
        }
    }

    pub fn labels(&self) -> &LabelStore {
        &self.labels
    }

    pub fn catalog(&self) -> &ImageCatalog {
        &self.catalog
    }

    pub fn model_loaded(&self) -> bool {
        self.engine.get().is_some()
    }

    /// Installs the model and starts its inference executor thread.
    /// Returns `false` if a model was already installed.
    pub fn install_model(&self, model: Arc<dyn Regressor>, meta: CheckpointMeta) -> bool {
        if self.engine.get().is_some() {
            return false;
        }
        let (tx, mut rx) = mpsc::channel::<RefineJob>(self.queue_depth);
        let cfg: SampleConfig = meta.sample_config();
        if self.engine.set(Engine { meta, jobs: tx }).is_err() {
            return false;
        }
        std::thread::Builder::new()
            .name("refine-executor".into())
            .spawn(move || {
                while let Some(job) = rx.blocking_recv() {
                    let _ = job.reply.send(refine(model.as_ref(), &job.image, &job.rough, &cfg));
                }
            })
            .expect("spawn executor thread");
        true
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/images", get(list_images))
        .route("/images/{*id}", get(get_image))
        .route("/refine", post(refine_box))
        .route("/labels", post(create_label).get(list_labels))
        .route("/labels/{id}", delete(delete_label))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn health(State(state): State<Shared>) -> Result<Json<serde_json::Value>, ApiError> {
    let engine = state
        .engine
        .get()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded"))?;
    Ok(Json(json!({
        "status": "ok",
        "model": engine.meta,
        "coordinates": COORDINATES,
        "images": state.catalog.len(),
    })))
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    page: Option<usize>,
    per_page: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ImagePage<'a> {
    images: Vec<&'a ImageEntry>,
    page: usize,
    per_page: usize,
    total: usize,
}

async fn list_images(State(state): State<Shared>, Query(q): Query<PageQuery>) -> Result<Response, ApiError> {
    let page = q.page.unwrap_or(1);
    let per_page = q.per_page.unwrap_or(DEFAULT_PER_PAGE);
    if page == 0 || per_page == 0 {
        return Err(ApiError::bad_request("page and per_page start at 1"));
    }
    Ok(Json(ImagePage {
        images: state.catalog.page(page, per_page),
        page,
        per_page,
        total: state.catalog.len(),
    })
    .into_response())
}

async fn get_image(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let entry = state
        .catalog
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown image {id:?}")))?;
    let bytes = tokio::fs::read(&entry.path).await.map_err(ApiError::internal)?;
    let mime = match entry.path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], Body::from(bytes)).into_response())
}

fn parse_box(raw: [f64; 4]) -> Result<BBox, ApiError> {
    BBox::from_array(raw).map_err(|e| ApiError::bad_request(e.to_string()))
}

#[derive(Debug, Deserialize)]
struct RefineRequest {
    image: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

async fn refine_box(State(state): State<Shared>, Json(req): Json<RefineRequest>) -> Result<Response, ApiError> {
    let started = Instant::now();
    let engine = state
        .engine
        .get()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded"))?;
    let rough = parse_box(req.bbox)?;
    if rough.area() < MIN_REFINE_AREA {
        return Err(ApiError::bad_request(format!("box area must be at least {MIN_REFINE_AREA} px²")));
    }
    if state.catalog.get(&req.image).is_none() {
        return Err(ApiError::not_found(format!("unknown image {:?}", req.image)));
    }
    let st = state.clone();
    let id = req.image.clone();
    let image = tokio::task::spawn_blocking(move || st.catalog.load(&id))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?
        .ok_or_else(|| ApiError::not_found(format!("unknown image {:?}", req.image)))?;
    let (reply, answer) = oneshot::channel();
    engine.jobs.try_send(RefineJob { image, rough, reply }).map_err(|e| match e {
        mpsc::error::TrySendError::Full(_) => ApiError::new(StatusCode::TOO_MANY_REQUESTS, "refine queue is full"),
        mpsc::error::TrySendError::Closed(_) => ApiError::internal("refine executor stopped"),
    })?;
    let refined = answer.await.map_err(ApiError::internal)?.map_err(|e| match e {
        ModelError::Geometry(g) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, g.to_string()),
        other => ApiError::internal(other),
    })?;
    Ok(Json(json!({
        "box": refined,
        "latency_ms": started.elapsed().as_secs_f64() * 1000.0,
    }))
    .into_response())
}

#[derive(Debug, Deserialize)]
struct LabelRequest {
    image: String,
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    source: LabelSource,
}

async fn create_label(State(state): State<Shared>, Json(req): Json<LabelRequest>) -> Result<Response, ApiError> {
    let bbox = parse_box(req.bbox)?;
    if req.class.trim().is_empty() {
        return Err(ApiError::bad_request("class must not be empty"));
    }
    let Some(entry) = state.catalog.get(&req.image) else {
        return Err(ApiError::bad_request(format!("unknown image {:?}", req.image)));
    };
    if bbox.x_min() < 0.0 || bbox.y_min() < 0.0 || bbox.x_max() > entry.width as f64 || bbox.y_max() > entry.height as f64 {
        return Err(ApiError::bad_request("box lies outside the image"));
    }
    let st = state.clone();
    let label = tokio::task::spawn_blocking(move || st.labels.insert(req.image, req.class, bbox, req.source))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": label.id }))).into_response())
}

#[derive(Debug, Deserialize)]
struct LabelQuery {
    image: Option<String>,
}

async fn list_labels(State(state): State<Shared>, Query(q): Query<LabelQuery>) -> Json<Vec<StoredLabel>> {
    Json(state.labels.list(q.image.as_deref()))
}

async fn delete_label(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ApiError> {
    let st = state.clone();
    let key = id.clone();
    let existed = tokio::task::spawn_blocking(move || st.labels.delete(&key))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    if existed {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(format!("unknown label {id:?}")))
    }
}

/// Serves until Ctrl-C.
pub async fn serve(state: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(address = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
