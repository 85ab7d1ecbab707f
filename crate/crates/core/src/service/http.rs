//! JSON API over [`Service`].
//!
//! | method | path | body / query | success |
//! |---|---|---|---|
//! | POST | `/api/batches` | `{manifest_path, confidence_threshold?}` | 201 [`BatchSummary`] |
//! | GET | `/api/tasks/next` | `?worker=` | 200 [`ReviewTask`], 204 when none |
//! | GET | `/api/tasks` | | 200 `[ReviewTask]` |
//! | POST | `/api/tasks/{task_id}/decision` | `{worker, decision}` | 200 [`DecisionReceipt`] |
//! | GET | `/api/tally` | | 200 `{evms}` |
//! | POST | `/api/evm-counts` | `{evm_id, counts}` | 204 |
//! | POST | `/api/reconcile` | `{evm_id?}` | 200 `{results}` |
//! | GET | `/api/reconciliation` | | 200 `{evms}` |
//! | GET | `/api/anomalies` | `?limit=&window_secs=` | 200 `{evms}` |
//! | GET | `/api/slips/{slip_id}/image` | `?evm_id=` | 200 image bytes |
//!
//! Errors are `{"error": <code>, "message": <text>}` with 400 for bad
//! input, 404 for unknown ids, 409 for state conflicts, 503 when no model
//! is loaded and 500 otherwise.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Service, ServiceError};
use crate::error::Error;
use crate::registry::PartyId;
use crate::tally::{Decision, TallyError, DEFAULT_RATE_LIMIT, DEFAULT_RATE_WINDOW_SECS};

type Shared = Arc<Service>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/batches", post(load_batch))
        .route("/api/tasks", get(list_tasks))
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{task_id}/decision", post(decide))
        .route("/api/tally", get(tally))
        .route("/api/evm-counts", post(evm_counts))
        .route("/api/reconcile", post(reconcile))
        .route("/api/reconciliation", get(reconciliation))
        .route("/api/anomalies", get(anomalies))
        .route("/api/slips/{slip_id}/image", get(slip_image))
        .with_state(service)
}

/// Serve until Ctrl-C.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    tracing::info!(%addr, "adjudication service listening");
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}

/// An [`Error`] rendered as an HTTP response.
#[derive(Debug)]
pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e.into())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(ServiceError::InvalidRequest(e.body_text()).into())
    }
}

fn classify(e: &Error) -> (StatusCode, &'static str) {
    use ServiceError as S;
    match e {
        Error::Service(s) => match s {
            S::DuplicateBatch(_) => (StatusCode::CONFLICT, "duplicate_batch"),
            S::EvmBusy(_) => (StatusCode::CONFLICT, "evm_busy"),
            S::UnknownTask(_) => (StatusCode::NOT_FOUND, "unknown_task"),
            S::NotClaimable(_) => (StatusCode::CONFLICT, "not_claimable"),
            S::NotClaimant { .. } => (StatusCode::CONFLICT, "not_claimant"),
            S::AlreadyDecided(_) => (StatusCode::CONFLICT, "already_decided"),
            S::UnknownEvm(_) => (StatusCode::NOT_FOUND, "unknown_evm"),
            S::UnknownSlip(_) => (StatusCode::NOT_FOUND, "unknown_slip"),
            S::UnknownParty(_) => (StatusCode::BAD_REQUEST, "unknown_party"),
            S::ModelNotLoaded => (StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded"),
            S::NoEvmCounts(_) => (StatusCode::CONFLICT, "no_evm_counts"),
            S::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            S::CorruptJournal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "corrupt_journal"),
            S::Tally(t) => tally_status(t),
        },
        Error::Tally(t) => tally_status(t),
        Error::Io { .. } => (StatusCode::BAD_REQUEST, "unreadable_input"),
        Error::Parse { .. } | Error::Registry(_) | Error::Dataset(_) => {
            (StatusCode::BAD_REQUEST, "invalid_input")
        }
        Error::Classifier(_) => (StatusCode::BAD_REQUEST, "classification_failed"),
        Error::Sim(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

fn tally_status(t: &TallyError) -> (StatusCode, &'static str) {
    match t {
        TallyError::UnresolvedQueue(_) => (StatusCode::CONFLICT, "unresolved_queue"),
        TallyError::AlreadyAdjudicated(_) => (StatusCode::CONFLICT, "already_decided"),
        TallyError::UnknownSlip(_) => (StatusCode::NOT_FOUND, "unknown_slip"),
        TallyError::ConservationViolated(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        _ => (StatusCode::BAD_REQUEST, "invalid_batch"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = classify(&self.0);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let body = json!({ "error": code, "message": self.0.to_string() });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Run blocking service work (journal fsync, classification) off the
/// async workers.
async fn blocking<T, F>(service: &Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> crate::Result<T> + Send + 'static,
{
    let service = Arc::clone(service);
    tokio::task::spawn_blocking(move || f(&service))
        .await
        .map_err(|e| ApiError(ServiceError::InvalidRequest(format!("worker task failed: {e}")).into()))?
        .map_err(ApiError)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadBatchRequest {
    pub manifest_path: PathBuf,
    #[serde(default)]
    pub confidence_threshold: Option<f64>,
}

async fn load_batch(
    State(service): State<Shared>,
    body: Result<Json<LoadBatchRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let summary = blocking(&service, move |s| {
        s.load_batch(&req.manifest_path, req.confidence_threshold)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(summary)))
}

#[derive(Debug, Deserialize)]
pub struct WorkerQuery {
    pub worker: Option<String>,
}

async fn next_task(
    State(service): State<Shared>,
    Query(q): Query<WorkerQuery>,
) -> ApiResult<Response> {
    let worker = q
        .worker
        .ok_or_else(|| ServiceError::InvalidRequest("missing ?worker= parameter".into()))?;
    let task = blocking(&service, move |s| s.claim_next_task(&worker)).await?;
    Ok(match task {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn list_tasks(State(service): State<Shared>) -> impl IntoResponse {
    Json(service.tasks())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub worker: String,
    pub decision: Decision,
}

async fn decide(
    State(service): State<Shared>,
    Path(task_id): Path<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(req) = body?;
    let receipt = blocking(&service, move |s| {
        s.submit_decision(&task_id, &req.worker, req.decision)
    })
    .await?;
    Ok(Json(receipt))
}

async fn tally(State(service): State<Shared>) -> impl IntoResponse {
    Json(service.tally())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvmCountsRequest {
    pub evm_id: String,
    pub counts: BTreeMap<PartyId, u64>,
}

async fn evm_counts(
    State(service): State<Shared>,
    body: Result<Json<EvmCountsRequest>, JsonRejection>,
) -> ApiResult<StatusCode> {
    let Json(req) = body?;
    blocking(&service, move |s| s.upload_evm_counts(&req.evm_id, req.counts)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconcileRequest {
    #[serde(default)]
    pub evm_id: Option<String>,
}

#[derive(Debug, Serialize)]
struct ReconcileResponse {
    results: Vec<crate::tally::ReconciliationResult>,
}

async fn reconcile(
    State(service): State<Shared>,
    body: Option<Json<ReconcileRequest>>,
) -> ApiResult<impl IntoResponse> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let results = blocking(&service, move |s| s.reconcile(req.evm_id.as_deref())).await?;
    Ok(Json(ReconcileResponse { results }))
}

async fn reconciliation(State(service): State<Shared>) -> impl IntoResponse {
    Json(service.reconciliation())
}

#[derive(Debug, Deserialize)]
pub struct AnomalyQuery {
    pub limit: Option<usize>,
    pub window_secs: Option<i64>,
}

async fn anomalies(
    State(service): State<Shared>,
    Query(q): Query<AnomalyQuery>,
) -> ApiResult<impl IntoResponse> {
    let window_secs = q.window_secs.unwrap_or(DEFAULT_RATE_WINDOW_SECS);
    if window_secs <= 0 {
        return Err(ServiceError::InvalidRequest("window_secs must be positive".into()).into());
    }
    let view = service.anomalies(
        q.limit.unwrap_or(DEFAULT_RATE_LIMIT),
        chrono::Duration::seconds(window_secs),
    )?;
    Ok(Json(view))
}

#[derive(Debug, Deserialize)]
pub struct SlipQuery {
    pub evm_id: Option<String>,
}

async fn slip_image(
    State(service): State<Shared>,
    Path(slip_id): Path<String>,
    Query(q): Query<SlipQuery>,
) -> ApiResult<Response> {
    let path = service.slip_image_path(&slip_id, q.evm_id.as_deref())?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(Error::io(&path, e)))?;
    let content_type = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => "image/png",
        Some(ext) if ext.eq_ignore_ascii_case("jpg") || ext.eq_ignore_ascii_case("jpeg") => {
            "image/jpeg"
        }
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}
