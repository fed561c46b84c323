use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use prefx_core::corpus::normalize_prefix;
use prefx_core::engine::{Engine, Scored, Source, SuggestOptions};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::config::ServeConfig;

/// Shared by every handler. The engine slot is filled once; until then
/// `/suggest` answers 503.
#[derive(Clone)]
pub struct AppState {
    engine: Arc<OnceLock<Engine>>,
    config: Arc<ServeConfig>,
}

impl AppState {
    pub fn loaded(engine: Engine, config: ServeConfig) -> Self {
        let state = Self::pending(config);
        let _ = state.engine.set(engine);
        state
    }

    pub fn pending(config: ServeConfig) -> Self {
        AppState {
            engine: Arc::new(OnceLock::new()),
            config: Arc::new(config),
        }
    }

    /// Returns the engine back if one was already installed.
    pub fn install(&self, engine: Engine) -> Result<(), Engine> {
        self.engine.set(engine)
    }

    pub fn is_loaded(&self) -> bool {
        self.engine.get().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestResponse {
    pub suggestions: Vec<Scored>,
    pub latency_ms: f64,
    pub source: Source,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

fn parse_count(q: &HashMap<String, String>, key: &str, default: usize, max: usize) -> Result<usize, Response> {
    match q.get(key) {
        None => Ok(default),
        Some(raw) => match raw.parse::<usize>() {
            Ok(v) if (1..=max).contains(&v) => Ok(v),
            _ => Err(error(
                StatusCode::BAD_REQUEST,
                format!("{key} must be an integer between 1 and {max}"),
            )),
        },
    }
}

async fn suggest(State(state): State<AppState>, Query(q): Query<HashMap<String, String>>) -> Response {
    let start = Instant::now();
    let cfg = &state.config;
    let Some(prefix) = q.get("prefix") else {
        return error(StatusCode::BAD_REQUEST, "missing required parameter: prefix");
    };
    if normalize_prefix(prefix).len() > cfg.max_prefix_len {
        return error(
            StatusCode::BAD_REQUEST,
            format!("prefix longer than {} bytes", cfg.max_prefix_len),
        );
    }
    let k = match parse_count(&q, "k", cfg.default_k, cfg.max_k) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let beam = match parse_count(&q, "beam", cfg.default_beam, cfg.max_beam) {
        Ok(v) => v,
        Err(r) => return r,
    };
    let Some(engine) = state.engine.get() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model is loading");
    };
    let prev = q.get("prev").map(String::as_str).unwrap_or("");
    let out = engine.suggest(
        prev,
        prefix,
        SuggestOptions {
            k,
            beam,
            mfq_fallback: cfg.mfq_fallback,
        },
    );
    Json(SuggestResponse {
        suggestions: out.suggestions,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        source: out.source,
    })
    .into_response()
}

async fn healthz(State(state): State<AppState>) -> Response {
    let status = if state.is_loaded() { "ok" } else { "loading" };
    Json(serde_json::json!({ "status": status })).into_response()
}

pub fn router(state: AppState) -> Router {
    let demo = ServeDir::new(&state.config.demo_dir).append_index_html_on_directories(true);
    Router::new()
        .route("/suggest", get(suggest))
        .route("/healthz", get(healthz))
        .nest_service("/demo", demo)
        .layer(CorsLayer::permissive())
        .with_state(state)
}
