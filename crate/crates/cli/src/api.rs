//! HTTP API of the review service.
//!
//! All bodies are JSON except slice images (PNG). Errors come back as
//! `{"error": <message>, "code": <machine code>}` with a matching status:
//!
//! | code               | status |
//! |--------------------|--------|
//! | `queue_empty`      | 404    |
//! | `not_found`        | 404    |
//! | `unknown_reviewer` | 403    |
//! | `not_assigned`     | 403    |
//! | `already_verdicted`| 409    |
//! | `no_verdict`       | 409    |
//! | `bad_request`      | 400    |
//! | `internal`         | 500    |
//!
//! Endpoints:
//!
//! - `POST /api/queue` with `{"bins": ["gt400", ...]}` or `{"range": [lo, hi]}`
//!   plus `n` and `seed` → `{"queue_id": ...}`
//! - `GET /api/queue/{id}` → the whole queue
//! - `GET /api/queue/{id}/next?reviewer=<id>` → the reviewer's current item
//! - `GET /api/slice/{study_uid}/{index}?wc=&ww=&overlay=` → PNG
//! - `POST /api/verdict` with `{item_id, reviewer_id, verdict, amend?}` → acknowledgement
//! - `GET /api/summary/{queue_id}` → summary counts and proportion correct

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cac_core::review::{encode_png, ReviewError, ReviewFilter, ReviewService, Verdict, WindowLevel};
use cac_core::CacBin;
use serde::Deserialize;
use serde_json::json;

pub struct ApiError(ReviewError);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use ReviewError::*;
        let (status, code) = match &self.0 {
            QueueEmpty => (StatusCode::NOT_FOUND, "queue_empty"),
            UnknownQueue(_) | UnknownItem(_) | UnknownStudy(_) => (StatusCode::NOT_FOUND, "not_found"),
            UnknownReviewer(_) => (StatusCode::FORBIDDEN, "unknown_reviewer"),
            NotAssigned { .. } => (StatusCode::FORBIDDEN, "not_assigned"),
            AlreadyVerdicted(_) => (StatusCode::CONFLICT, "already_verdicted"),
            NoVerdict(_) => (StatusCode::CONFLICT, "no_verdict"),
            SampleTooLarge { .. } | SliceOutOfRange { .. } | InvalidWindow(_) => {
                (StatusCode::BAD_REQUEST, "bad_request")
            }
            Log(_) | Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({ "error": self.0.to_string(), "code": code }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/api/queue", post(create_queue))
        .route("/api/queue/{id}", get(get_queue))
        .route("/api/queue/{id}/next", get(next_item))
        .route("/api/slice/{study_uid}/{index}", get(slice))
        .route("/api/verdict", post(verdict))
        .route("/api/summary/{queue_id}", get(summary))
        .with_state(service)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueueRequest {
    bins: Option<BTreeSet<CacBin>>,
    range: Option<(u64, u64)>,
    n: usize,
    seed: u64,
}

fn bad_request(message: &str) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": message, "code": "bad_request" }))).into_response()
}

async fn create_queue(State(svc): State<Arc<ReviewService>>, Json(req): Json<QueueRequest>) -> Response {
    let filter = match (req.bins, req.range) {
        (Some(bins), None) => ReviewFilter::Bins(bins),
        (None, Some((lo, hi))) if lo <= hi => ReviewFilter::Range(lo, hi),
        (None, Some(_)) => return bad_request("range must be [lo, hi] with lo <= hi"),
        _ => return bad_request("give exactly one of `bins` or `range`"),
    };
    match svc.create_queue(&filter, req.n, req.seed) {
        Ok(queue_id) => (StatusCode::CREATED, Json(json!({ "queue_id": queue_id }))).into_response(),
        Err(e) => ApiError(e).into_response(),
    }
}

async fn get_queue(State(svc): State<Arc<ReviewService>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.queue(&id)?))
}

#[derive(Deserialize)]
struct NextQuery {
    reviewer: String,
}

async fn next_item(
    State(svc): State<Arc<ReviewService>>,
    Path(id): Path<String>,
    Query(q): Query<NextQuery>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.next_item(&id, &q.reviewer)?))
}

#[derive(Deserialize)]
struct SliceQuery {
    wc: Option<f64>,
    ww: Option<f64>,
    #[serde(default)]
    overlay: bool,
}

async fn slice(
    State(svc): State<Arc<ReviewService>>,
    Path((study_uid, index)): Path<(String, usize)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let default = WindowLevel::default();
    let window = WindowLevel { center: q.wc.unwrap_or(default.center), width: q.ww.unwrap_or(default.width) };
    // Loading and encoding are CPU and disk bound; keep them off the reactor.
    let png = tokio::task::spawn_blocking(move || {
        let img = svc.render(&study_uid, index, window, q.overlay)?;
        encode_png(&img)
    })
    .await
    .map_err(|e| ReviewError::Io(std::io::Error::other(e)))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictRequest {
    item_id: String,
    reviewer_id: String,
    verdict: Verdict,
    /// Record a correction to an existing verdict instead of a first verdict.
    #[serde(default)]
    amend: bool,
}

async fn verdict(
    State(svc): State<Arc<ReviewService>>,
    Json(req): Json<VerdictRequest>,
) -> ApiResult<impl IntoResponse> {
    let ack = if req.amend {
        svc.amend_verdict(&req.item_id, &req.reviewer_id, req.verdict)?
    } else {
        svc.post_verdict(&req.item_id, &req.reviewer_id, req.verdict)?
    };
    Ok(Json(ack))
}

async fn summary(State(svc): State<Arc<ReviewService>>, Path(queue_id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.summary(&queue_id)?))
}
