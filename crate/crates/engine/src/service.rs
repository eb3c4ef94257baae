//! HTTP/JSON service.
//!
//! | method | path                                   | response                  |
//! |--------|----------------------------------------|---------------------------|
//! | GET    | `/v1/models`                           | catalog                   |
//! | GET    | `/v1/datasets`                         | dataset descriptors       |
//! | POST   | `/v1/predict`                          | `{prediction, trace_id}`  |
//! | GET    | `/v1/trace/{id}`                       | trace JSON                |
//! | GET    | `/v1/trace/{id}/provenance?step=&cell=`| provenance JSON           |
//!
//! Failures are `{"error": <name>, "detail": <message>}`.

use std::collections::{HashSet, VecDeque};
use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use glassgnn::{Prediction, Trace};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Engine, EngineConfig, EngineError, PredictRequest};

pub const TRACE_CACHE_CAPACITY: usize = 64;
const EVICTED_MEMORY: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub bundle_dir: PathBuf,
    pub dataset_dir: PathBuf,
    pub max_trace_nodes: usize,
    pub cors_allowed: bool,
}

impl ServiceConfig {
    fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            bundle_dir: self.bundle_dir.clone(),
            dataset_dir: self.dataset_dir.clone(),
            max_trace_nodes: self.max_trace_nodes,
        }
    }
}

struct CachedTrace {
    trace: Trace,
    json: Bytes,
}

struct TraceCache {
    live: LruCache<String, Arc<CachedTrace>>,
    evicted: HashSet<String>,
    evicted_order: VecDeque<String>,
}

impl TraceCache {
    fn new(capacity: usize) -> Self {
        Self {
            live: LruCache::new(NonZeroUsize::new(capacity.max(1)).unwrap()),
            evicted: HashSet::new(),
            evicted_order: VecDeque::new(),
        }
    }

    fn insert(&mut self, id: String, entry: Arc<CachedTrace>) {
        self.evicted.remove(&id);
        if let Some((old, _)) = self.live.push(id.clone(), entry) {
            if old != id {
                self.evicted_order.push_back(old.clone());
                self.evicted.insert(old);
                if self.evicted_order.len() > EVICTED_MEMORY {
                    if let Some(gone) = self.evicted_order.pop_front() {
                        self.evicted.remove(&gone);
                    }
                }
            }
        }
    }

    fn get(&mut self, id: &str) -> Result<Arc<CachedTrace>, EngineError> {
        if let Some(t) = self.live.get(id) {
            return Ok(t.clone());
        }
        if self.evicted.contains(id) {
            Err(EngineError::TraceEvicted(id.to_string()))
        } else {
            Err(EngineError::UnknownTrace(id.to_string()))
        }
    }
}

pub struct AppState {
    engine: Engine,
    traces: Mutex<TraceCache>,
}

impl AppState {
    pub fn new(engine: Engine, cache_capacity: usize) -> Self {
        Self {
            engine,
            traces: Mutex::new(TraceCache::new(cache_capacity)),
        }
    }
}

pub struct ApiError(EngineError);

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        ApiError(e)
    }
}

impl From<glassgnn::Error> for ApiError {
    fn from(e: glassgnn::Error) -> Self {
        ApiError(e.into())
    }
}

fn status_of(e: &EngineError) -> StatusCode {
    let name = e.name();
    match name {
        "TraceEvicted" | "UnknownTrace" | "ModelNotFound" | "UnknownDataset" | "UnknownStep" => StatusCode::NOT_FOUND,
        "TooLargeToTrace" => StatusCode::PAYLOAD_TOO_LARGE,
        _ if e.is_client_error() => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        if status.is_server_error() {
            log::error!("{}: {}", self.0.name(), self.0);
        }
        (status, Json(json!({ "error": self.0.name(), "detail": self.0.to_string() }))).into_response()
    }
}

#[derive(Serialize)]
struct ModelInfo<'a> {
    variant: glassgnn::Variant,
    task: glassgnn::Task,
    dataset: &'a str,
}

async fn models(State(state): State<Arc<AppState>>) -> Response {
    let list: Vec<ModelInfo> = state
        .engine
        .catalog()
        .iter()
        .map(|e| ModelInfo {
            variant: e.variant,
            task: e.task,
            dataset: &e.dataset,
        })
        .collect();
    Json(list).into_response()
}

async fn datasets(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let s = state.clone();
    let list = tokio::task::spawn_blocking(move || s.engine.dataset_descriptors())
        .await
        .map_err(|e| EngineError::BadRequest(e.to_string()))??;
    Ok(Json(list).into_response())
}

#[derive(Serialize)]
struct PredictResponse {
    prediction: Prediction,
    trace_id: String,
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: PredictRequest = serde_json::from_slice(&body)
        .map_err(|e| EngineError::BadRequest(format!("invalid request body: {e}")))?;
    let s = state.clone();
    let outcome = tokio::task::spawn_blocking(move || s.engine.predict(&req))
        .await
        .map_err(|e| EngineError::BadRequest(e.to_string()))??;
    let id = outcome.prediction.trace_id.clone();
    state.traces.lock().unwrap().insert(
        id.clone(),
        Arc::new(CachedTrace {
            trace: outcome.trace,
            json: Bytes::from(outcome.trace_json),
        }),
    );
    Ok(Json(PredictResponse {
        prediction: outcome.prediction,
        trace_id: id,
    })
    .into_response())
}

async fn trace(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let t = state.traces.lock().unwrap().get(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], t.json.clone()).into_response())
}

#[derive(Deserialize)]
struct CellQuery {
    step: Option<String>,
    cell: Option<String>,
}

fn query_number<T: std::str::FromStr>(name: &str, v: &Option<String>) -> Result<T, EngineError> {
    let raw = v
        .as_deref()
        .ok_or_else(|| EngineError::BadRequest(format!("query parameter {name} is required")))?;
    raw.parse()
        .map_err(|_| EngineError::BadRequest(format!("query parameter {name} is not a non-negative integer")))
}

async fn provenance(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<CellQuery>,
) -> Result<Response, ApiError> {
    let step: u32 = query_number("step", &q.step)?;
    let cell: usize = query_number("cell", &q.cell)?;
    let t = state.traces.lock().unwrap().get(&id)?;
    let p = t.trace.cell_provenance(step, cell)?;
    Ok(Json(p).into_response())
}

pub fn router(state: Arc<AppState>, cors_allowed: bool) -> Router {
    let app = Router::new()
        .route("/v1/models", get(models))
        .route("/v1/datasets", get(datasets))
        .route("/v1/predict", post(predict))
        .route("/v1/trace/{id}", get(trace))
        .route("/v1/trace/{id}/provenance", get(provenance))
        .with_state(state);
    if cors_allowed {
        app.layer(tower_http::cors::CorsLayer::permissive())
    } else {
        app
    }
}

/// Binds the port and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), EngineError> {
    if config.port == 0 {
        return Err(EngineError::Startup("port must be in 1..=65535".into()));
    }
    let engine = Engine::open(config.engine_config())?;
    let state = Arc::new(AppState::new(engine, TRACE_CACHE_CAPACITY));
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|e| EngineError::Startup(format!("invalid host {}: {e}", config.host)))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| EngineError::Startup(format!("cannot bind port {}: {e}", config.port)))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(state, config.cors_allowed))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| EngineError::Startup(e.to_string()))
}
