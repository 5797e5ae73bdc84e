//! Versioned HTTP+JSON API over [`OracleQueue`]s.
//!
//! | Method | Path | |
//! |---|---|---|
//! | `GET` | `/v1/runs/{id}/requests?state=pending` | open requests, oldest first |
//! | `POST` | `/v1/runs/{id}/answers` | body `{"request_id": 3, "label": 7}` |
//! | `GET` | `/v1/runs/{id}/status` | iteration, accuracy, labels acquired |
//!
//! `state` is one of `pending` (default), `answered`, `expired` or `all`.
//! Image payloads are base64-encoded grayscale PNGs, points are raw
//! coordinates. Labels are 0-based class indices. Errors are
//! `{"error": "...", "reason": "..."}` with status 404 for unknown runs or
//! requests, 409 for answered or expired requests, 422 for invalid labels
//! and 401 for a missing or wrong token.
//!
//! With a token configured every request must carry
//! `Authorization: Bearer <token>`.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use deepbass::oracle::{AnswerSource, OracleQueue, Payload, RequestState, RequestView, RunStatus, SubmitError};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default)]
pub struct ServiceState {
    runs: Arc<HashMap<String, OracleQueue>>,
    token: Option<Arc<str>>,
}

impl ServiceState {
    pub fn new(queues: impl IntoIterator<Item = OracleQueue>, token: Option<String>) -> Self {
        Self {
            runs: Arc::new(queues.into_iter().map(|q| (q.run_id().to_string(), q)).collect()),
            token: token.map(Into::into),
        }
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/v1/runs/{id}/requests", get(list_requests))
        .route("/v1/runs/{id}/answers", post(submit_answer))
        .route("/v1/runs/{id}/status", get(status))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: ServiceState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub reason: String,
}

fn fail(status: StatusCode, reason: &str, error: impl Into<String>) -> Response {
    (
        status,
        Json(ApiError {
            error: error.into(),
            reason: reason.into(),
        }),
    )
        .into_response()
}

impl ServiceState {
    fn authorize(&self, headers: &HeaderMap) -> Result<(), Response> {
        let Some(token) = &self.token else { return Ok(()) };
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        match given {
            Some(t) if t == &**token => Ok(()),
            _ => Err(fail(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong run token")),
        }
    }

    fn queue(&self, headers: &HeaderMap, id: &str) -> Result<&OracleQueue, Response> {
        self.authorize(headers)?;
        self.runs
            .get(id)
            .ok_or_else(|| fail(StatusCode::NOT_FOUND, "unknown_run", format!("run {id:?} does not exist")))
    }
}

/// A payload as sent to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WirePayload {
    Image { width: usize, height: usize, png_base64: String },
    Point { x: f64, y: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub request_id: u64,
    pub sample_id: usize,
    pub state: RequestState,
    pub entropy: f64,
    pub suggestion: usize,
    pub iteration: usize,
    pub issued_at: u64,
    pub expires_at: Option<u64>,
    pub payload: WirePayload,
}

/// Encodes 8-bit grayscale pixels as a PNG.
pub fn encode_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(pixels)?;
    w.finish()?;
    Ok(out)
}

fn to_wire(v: RequestView) -> Result<WireRequest, png::EncodingError> {
    let payload = match v.request.payload {
        Payload::Image { height, width, pixels } => WirePayload::Image {
            width,
            height,
            png_base64: STANDARD.encode(encode_png(width, height, &pixels)?),
        },
        Payload::Point { x, y } => WirePayload::Point { x, y },
    };
    Ok(WireRequest {
        request_id: v.request.request_id,
        sample_id: v.request.sample_id,
        state: v.state,
        entropy: v.request.entropy,
        suggestion: v.request.suggestion,
        iteration: v.request.iteration,
        issued_at: v.issued_at,
        expires_at: v.expires_at,
        payload,
    })
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    state: Option<String>,
}

async fn list_requests(
    State(st): State<ServiceState>,
    Path(id): Path<String>,
    Query(q): Query<ListQuery>,
    headers: HeaderMap,
) -> Response {
    let queue = match st.queue(&headers, &id) {
        Ok(q) => q,
        Err(r) => return r,
    };
    let filter = match q.state.as_deref().unwrap_or("pending") {
        "pending" => Some(RequestState::Pending),
        "answered" => Some(RequestState::Answered),
        "expired" => Some(RequestState::Expired),
        "all" => None,
        other => {
            return fail(
                StatusCode::BAD_REQUEST,
                "invalid_state",
                format!("state {other:?} is not one of pending, answered, expired, all"),
            )
        }
    };
    let views = match queue.requests(filter) {
        Ok(v) => v,
        Err(e) => return fail(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string()),
    };
    match views.into_iter().map(to_wire).collect::<Result<Vec<_>, _>>() {
        Ok(list) => Json(list).into_response(),
        Err(e) => fail(StatusCode::INTERNAL_SERVER_ERROR, "encoding", e.to_string()),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnswerBody {
    pub request_id: u64,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerAck {
    pub request_id: u64,
    pub sample_id: usize,
    pub label: usize,
    pub answered_at: u64,
}

async fn submit_answer(
    State(st): State<ServiceState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<AnswerBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let queue = match st.queue(&headers, &id) {
        Ok(q) => q,
        Err(r) => return r,
    };
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return fail(StatusCode::UNPROCESSABLE_ENTITY, "invalid_body", e.body_text()),
    };
    match queue.submit_answer(body.request_id, body.label, AnswerSource::Human) {
        Ok(a) => (
            StatusCode::CREATED,
            Json(AnswerAck {
                request_id: a.request_id,
                sample_id: a.sample_id,
                label: a.label,
                answered_at: a.answered_at,
            }),
        )
            .into_response(),
        Err(e) => {
            let (status, reason) = match e {
                SubmitError::UnknownRequest(_) => (StatusCode::NOT_FOUND, "unknown_request"),
                SubmitError::AlreadyAnswered(_) => (StatusCode::CONFLICT, "already_answered"),
                SubmitError::Expired(_) => (StatusCode::CONFLICT, "expired"),
                SubmitError::InvalidLabel { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_label"),
                SubmitError::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
            };
            fail(status, reason, e.to_string())
        }
    }
}

async fn status(State(st): State<ServiceState>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    match st.queue(&headers, &id) {
        Ok(q) => Json::<RunStatus>(q.status()).into_response(),
        Err(r) => r,
    }
}
