//! HTTP/JSON API over a [`ReviewStore`]. Every JSON body carries `schema_version`.
//!
//! | method | path | body |
//! |---|---|---|
//! | GET | `/api/queue?status=pending&class=cat` | queue items |
//! | GET | `/api/candidates/{id}` | item, labels, judged run |
//! | POST | `/api/labels` | [`LabelReceipt`](crate::LabelReceipt) |
//! | GET | `/api/report` | campaign report |
//! | GET | `/api/runs/{id}/trace` | trace manifest |
//! | GET | `/api/runs/{id}/images/{step}` | PNG |

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use naegen_core::harness::RunRecord;
use naegen_core::OracleLabel;
use serde::{Deserialize, Serialize};

use crate::error::ReviewError;
use crate::store::{ItemStatus, QueueEntry, ReviewStore, REVIEW_SCHEMA_VERSION};

type Shared = Arc<RwLock<ReviewStore>>;

pub fn router(store: ReviewStore) -> Router {
    let state: Shared = Arc::new(RwLock::new(store));
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/candidates/{id}", get(candidate))
        .route("/api/labels", post(submit))
        .route("/api/report", get(report))
        .route("/api/runs/{id}/trace", get(trace))
        .route("/api/runs/{id}/images/{step}", get(image))
        .with_state(state)
}

pub async fn serve(store: ReviewStore, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}

#[derive(Serialize)]
struct ErrorBody {
    schema_version: u32,
    error: ErrorDetail,
}

#[derive(Serialize)]
struct ErrorDetail {
    kind: &'static str,
    message: String,
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let status = match &self {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            schema_version: REVIEW_SCHEMA_VERSION,
            error: ErrorDetail { kind: self.kind(), message: self.to_string() },
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Serialize)]
struct ItemView {
    #[serde(flatten)]
    entry: QueueEntry,
    status: ItemStatus,
    init_image_url: String,
    candidate_image_url: String,
}

fn view(entry: &QueueEntry, status: ItemStatus) -> ItemView {
    ItemView {
        entry: entry.clone(),
        status,
        init_image_url: image_url(&entry.run_id, 0),
        candidate_image_url: image_url(&entry.run_id, entry.step),
    }
}

fn image_url(run_id: &str, step: usize) -> String {
    format!("/api/runs/{run_id}/images/{step}")
}

#[derive(Deserialize)]
struct QueueParams {
    status: Option<String>,
    class: Option<String>,
}

#[derive(Serialize)]
struct QueueResponse {
    schema_version: u32,
    total: usize,
    items: Vec<ItemView>,
}

async fn queue(State(s): State<Shared>, Query(q): Query<QueueParams>) -> Result<Json<QueueResponse>, ReviewError> {
    let status = q.status.as_deref().map(str::parse).transpose()?;
    let store = s.read().expect("store lock poisoned");
    let items: Vec<ItemView> = store.queue(status, q.class.as_deref()).into_iter().map(|(e, st)| view(e, st)).collect();
    Ok(Json(QueueResponse { schema_version: REVIEW_SCHEMA_VERSION, total: items.len(), items }))
}

#[derive(Serialize)]
struct CandidateResponse {
    schema_version: u32,
    item: ItemView,
    labels: Vec<OracleLabel>,
    run: RunRecord,
}

async fn candidate(State(s): State<Shared>, Path(id): Path<String>) -> Result<Json<CandidateResponse>, ReviewError> {
    let store = s.read().expect("store lock poisoned");
    let entry = store.candidate(&id)?;
    Ok(Json(CandidateResponse {
        schema_version: REVIEW_SCHEMA_VERSION,
        item: view(entry, store.status(&id)),
        labels: store.labels_for(&id),
        run: store.record(&entry.run_id)?,
    }))
}

/// Parsed by hand so malformed bodies get the same error shape as invalid labels.
/// `timestamp` defaults to the time of receipt.
async fn submit(State(s): State<Shared>, body: Bytes) -> Result<Response, ReviewError> {
    let mut value: serde_json::Value =
        serde_json::from_slice(&body).map_err(|e| ReviewError::Validation(format!("malformed JSON: {e}")))?;
    let obj = value.as_object_mut().ok_or_else(|| ReviewError::Validation("label must be a JSON object".into()))?;
    obj.entry("timestamp").or_insert_with(|| serde_json::Value::String(chrono::Utc::now().to_rfc3339()));
    let label: OracleLabel = serde_json::from_value(value).map_err(|e| ReviewError::Validation(e.to_string()))?;
    let receipt = s.write().expect("store lock poisoned").submit_label(label)?;
    Ok(Json(receipt).into_response())
}

async fn report(State(s): State<Shared>) -> Response {
    Json(s.read().expect("store lock poisoned").report().clone()).into_response()
}

async fn trace(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ReviewError> {
    let manifest = s.read().expect("store lock poisoned").trace(&id)?;
    Ok(Json(manifest).into_response())
}

async fn image(State(s): State<Shared>, Path((id, step)): Path<(String, usize)>) -> Result<Response, ReviewError> {
    let bytes = s.read().expect("store lock poisoned").image(&id, step)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}
