#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use glassgnn_engine::{router, AppState, Engine, EngineConfig};
use http_body_util::BodyExt;
use tower::ServiceExt;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn engine_config() -> EngineConfig {
    EngineConfig {
        bundle_dir: data_dir().join("bundles"),
        dataset_dir: data_dir().join("datasets"),
        ..EngineConfig::default()
    }
}

pub fn app(cache_capacity: usize) -> Router {
    let engine = Engine::open(engine_config()).unwrap();
    router(Arc::new(AppState::new(engine, cache_capacity)), false)
}

/// Sends one request through the router and collects the body.
pub async fn call(app: &Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(serde_json::to_vec(&v).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

pub fn trace_validator() -> jsonschema::Validator {
    let schema: serde_json::Value =
        serde_json::from_slice(&std::fs::read(data_dir().join("schema/trace.schema.json")).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}
