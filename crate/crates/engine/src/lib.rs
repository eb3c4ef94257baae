//! Command-line tool and HTTP service around the `glassgnn` engine.

pub mod cli;
pub mod engine;
pub mod service;

pub use engine::{Engine, EngineConfig, EngineError, PredictOutcome, PredictRequest};
pub use service::{router, AppState, ServiceConfig};
