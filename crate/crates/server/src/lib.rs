//! HTTP surface over a loaded pipeline.
//!
//! `POST /v1/query` answers one question, optionally with per-request config
//! overrides. `GET /v1/health` reports index size and backend reachability.
//! `POST /v1/reindex` rebuilds the index from the configured corpus and swaps
//! it in. A built UI bundle, when configured, is served at `/`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use docqa_core::pipeline::{
    reindex, Backends, ContextHit, Pipeline, PipelineConfig, PipelineError, ReindexReport, RerankInfo,
};
use docqa_core::qa::RewriteArtifacts;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub const ENV_API_TOKEN: &str = "RAG_API_TOKEN";

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub question: String,
    #[serde(default)]
    pub overrides: serde_json::Value,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct QueryResponse {
    pub answer: String,
    pub contexts: Vec<ContextHit>,
    pub timings: BTreeMap<String, f64>,
    pub fingerprint: String,
    pub rewrite: RewriteArtifacts,
    pub rerank: Vec<RerankInfo>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct HealthResponse {
    pub status: String,
    pub index_doc_count: usize,
    pub backends: BTreeMap<String, Option<bool>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ErrorBody {
    pub error: String,
    pub stage: String,
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Directory holding the chunk store and index snapshots.
    pub index_dir: Option<PathBuf>,
    /// Source package used by `/v1/reindex`.
    pub corpus: Option<PathBuf>,
    /// Built UI bundle served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub api_token: Option<String>,
}

pub struct AppState {
    pipeline: RwLock<Option<Arc<Pipeline>>>,
    config: PipelineConfig,
    backends: Backends,
    options: ServerOptions,
    reindex_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(pipeline: Option<Pipeline>, config: PipelineConfig, backends: Backends, options: ServerOptions) -> Self {
        Self {
            pipeline: RwLock::new(pipeline.map(Arc::new)),
            config,
            backends,
            options,
            reindex_lock: tokio::sync::Mutex::new(()),
        }
    }

    pub fn current(&self) -> Option<Arc<Pipeline>> {
        self.pipeline.read().expect("pipeline lock").clone()
    }

    fn swap(&self, pipeline: Pipeline) {
        *self.pipeline.write().expect("pipeline lock") = Some(Arc::new(pipeline));
    }
}

struct ApiError {
    status: StatusCode,
    stage: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, stage: &str, message: impl ToString) -> Self {
        Self {
            status,
            stage: stage.to_string(),
            message: message.to_string(),
        }
    }

    fn bad_request(message: impl ToString) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "request", message)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Config(_) => StatusCode::BAD_REQUEST,
            e if e.is_unavailable() => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.stage_tag(), &e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            stage: self.stage,
        };
        (self.status, Json(body)).into_response()
    }
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(token) = &state.options.api_token else {
        return Ok(());
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "auth", "missing or invalid bearer token"))
    }
}

async fn query(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Result<Json<QueryResponse>, ApiError> {
    authorize(&state, &headers)?;
    let request: QueryRequest = serde_json::from_slice(&body).map_err(ApiError::bad_request)?;
    if request.question.trim().is_empty() {
        return Err(ApiError::bad_request("question is empty"));
    }
    let pipeline = state
        .current()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "index", "no index loaded"))?;
    let config = pipeline
        .config()
        .with_overrides(&request.overrides)
        .map_err(ApiError::bad_request)?;
    let result = tokio::task::spawn_blocking(move || pipeline.run_query_with(&request.question, &config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "query", e))??;
    Ok(Json(QueryResponse {
        answer: result.answer,
        contexts: result.contexts,
        timings: result.timings,
        fingerprint: result.fingerprint,
        rewrite: result.rewrite,
        rerank: result.rerank,
        warnings: result.warnings,
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    let pipeline = state.current();
    let backends = state.backends.reachability();
    let degraded = pipeline.is_none() || backends.values().any(|r| *r == Some(false));
    Json(HealthResponse {
        status: if degraded { "degraded" } else { "ok" }.to_string(),
        index_doc_count: pipeline.map_or(0, |p| p.store().chunks.len()),
        backends,
    })
}

async fn reindex_handler(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Result<Json<ReindexReport>, ApiError> {
    authorize(&state, &headers)?;
    let (Some(corpus), Some(index_dir)) = (state.options.corpus.clone(), state.options.index_dir.clone()) else {
        return Err(ApiError::bad_request("server was started without a corpus and index directory"));
    };
    let _guard = state.reindex_lock.lock().await;
    let worker = state.clone();
    let (report, pipeline) = tokio::task::spawn_blocking(move || -> Result<_, PipelineError> {
        let report = reindex(&corpus, &index_dir, &worker.config, worker.backends.embedder.as_ref())?;
        let pipeline = Pipeline::open(&index_dir, worker.config.clone(), worker.backends.clone())?;
        Ok((report, pipeline))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "reindex", e))??;
    state.swap(pipeline);
    Ok(Json(report))
}

pub fn router(state: Arc<AppState>) -> Router {
    let ui_dir = state.options.ui_dir.clone();
    let app = Router::new()
        .route("/v1/query", post(query))
        .route("/v1/health", get(health))
        .route("/v1/reindex", post(reindex_handler))
        .with_state(state);
    match ui_dir {
        Some(dir) if dir.is_dir() => app.fallback_service(ServeDir::new(dir)),
        _ => app,
    }
}
