//! HTTP ranking service over a frozen model and retrieval index.
//!
//! `GET /health` reports the index size, `POST /rank` takes
//! `{"query": "...", "k": N}` and answers with the top `k` items.

use std::future::Future;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fusebed::data::{load_dataset, Item, MetadataKind};
use fusebed::eval::{build_index, rank_items, RankedItem, RetrievalIndex};
use fusebed::model::{FusionMode, HybridModel};
use fusebed::train::load_checkpoint;
use log::{debug, info};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

pub const DEFAULT_PORT: u16 = 8750;
pub const DEFAULT_CONCURRENCY: usize = 8;

/// Immutable model and index shared by all handlers.
pub struct ServiceState {
    model: HybridModel,
    index: RetrievalIndex,
    permits: Semaphore,
    requests: AtomicU64,
}

impl ServiceState {
    pub fn new(model: HybridModel, index: RetrievalIndex, concurrency: usize) -> fusebed::error::Result<Self> {
        if model.mode() != index.mode() {
            return Err(fusebed::error::Error::Config(format!(
                "mode: index was built for {}, model is {}",
                index.mode(),
                model.mode()
            )));
        }
        Ok(Self {
            model,
            index,
            permits: Semaphore::new(concurrency.max(1)),
            requests: AtomicU64::new(0),
        })
    }

    /// Loads a checkpoint and indexes every item of a dataset directory.
    /// `mode`, when given, must match the checkpoint; `metadata` defaults to
    /// the dataset's declared kind.
    pub fn from_files(
        checkpoint: &Path,
        dataset: &Path,
        mode: Option<FusionMode>,
        metadata: Option<MetadataKind>,
        concurrency: usize,
    ) -> fusebed::error::Result<Self> {
        let ck = load_checkpoint(checkpoint)?;
        if let Some(mode) = mode.filter(|m| *m != ck.model.mode()) {
            return Err(fusebed::error::Error::Config(format!(
                "mode: checkpoint holds a {} model, {mode} was requested",
                ck.model.mode()
            )));
        }
        let ds = load_dataset(dataset)?;
        let kind = metadata.unwrap_or(ds.metadata_kind());
        let items: Vec<&Item> = ds.items().iter().collect();
        let index = build_index(&items, &ck.model, kind)?;
        Self::new(ck.model, index, concurrency)
    }

    pub fn model(&self) -> &HybridModel {
        &self.model
    }

    pub fn index(&self) -> &RetrievalIndex {
        &self.index
    }

    pub fn requests_served(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Deserialize)]
struct RankRequest {
    query: String,
    k: i64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RankResponse {
    pub results: Vec<RankedItem>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct HealthResponse {
    pub status: String,
    pub items: usize,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        items: state.index.len(),
    })
}

async fn rank(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<RankResponse>, ApiError> {
    let req: RankRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))?;
    if req.k < 1 {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("k must be at least 1, got {}", req.k)));
    }
    let k = usize::try_from(req.k).unwrap_or(usize::MAX);
    let _permit = state
        .permits
        .acquire()
        .await
        .map_err(|_| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "service is shutting down".into()))?;
    state.requests.fetch_add(1, Ordering::Relaxed);
    debug!("rank k={k} query={:?}", req.query);
    let worker = Arc::clone(&state);
    let results = tokio::task::spawn_blocking(move || rank_items(&worker.index, &req.query, &worker.model, k))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("scoring task failed: {e}")))?
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(RankResponse { results }))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/rank", post(rank))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve<F>(listener: TcpListener, state: Arc<ServiceState>, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    info!(
        "serving {} {} items on {}",
        state.index.len(),
        state.model.mode(),
        listener.local_addr()?
    );
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
