//! HTTP JSON API over a shared [`Survey`].

use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::{Side, Survey, SurveyError};

pub const SESSION_COOKIE: &str = "survey_session";

pub type Shared = Arc<Mutex<Survey>>;

impl IntoResponse for SurveyError {
    fn into_response(self) -> Response {
        let status = match &self {
            SurveyError::UnknownDataset(_) | SurveyError::UnknownPair(_) => StatusCode::NOT_FOUND,
            SurveyError::Exhausted(_) => StatusCode::GONE,
            SurveyError::Duplicate(_) => StatusCode::CONFLICT,
            SurveyError::InvalidRecord(_) => StatusCode::BAD_REQUEST,
            SurveyError::Io { .. } | SurveyError::Parse { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn lock(state: &Shared) -> std::sync::MutexGuard<'_, Survey> {
    state.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn session_from(headers: &HeaderMap) -> Option<String> {
    headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, v)| *k == SESSION_COOKIE && !v.is_empty())
        .map(|(_, v)| v.to_string())
}

/// Existing session id, or a fresh one with the `Set-Cookie` header to issue it.
fn session(headers: &HeaderMap) -> (String, Option<HeaderValue>) {
    if let Some(id) = session_from(headers) {
        return (id, None);
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let cookie = HeaderValue::from_str(&format!("{SESSION_COOKIE}={id}; Path=/; HttpOnly; SameSite=Strict")).ok();
    (id, cookie)
}

#[derive(Deserialize)]
struct PairQuery {
    dataset: String,
}

async fn pair(State(state): State<Shared>, headers: HeaderMap, Query(q): Query<PairQuery>) -> Response {
    let (sid, set_cookie) = session(&headers);
    let served = lock(&state).make_pair(&q.dataset, &sid);
    let mut response = match served {
        Ok(p) => Json(p).into_response(),
        Err(e) => e.into_response(),
    };
    if let Some(c) = set_cookie {
        response.headers_mut().insert(header::SET_COOKIE, c);
    }
    response
}

#[derive(Deserialize)]
struct VoteBody {
    pair_id: String,
    chosen_side: Side,
}

async fn vote(State(state): State<Shared>, headers: HeaderMap, Json(body): Json<VoteBody>) -> Response {
    let Some(sid) = session_from(&headers) else {
        return (StatusCode::BAD_REQUEST, Json(json!({ "error": "missing session cookie" }))).into_response();
    };
    let recorded = lock(&state).record_vote(&body.pair_id, body.chosen_side, &sid);
    match recorded {
        Ok(_) => Json(json!({ "accepted": true })).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn results(State(state): State<Shared>) -> Response {
    Json(lock(&state).results()).into_response()
}

async fn datasets(State(state): State<Shared>) -> Response {
    Json(json!({ "datasets": lock(&state).datasets() })).into_response()
}

async fn image(State(state): State<Shared>, Path((pair_id, side)): Path<(String, String)>) -> Response {
    let side = match side.as_str() {
        "left" => Side::Left,
        "right" => Side::Right,
        _ => return StatusCode::NOT_FOUND.into_response(),
    };
    let path = match lock(&state).image_path(&pair_id, side) {
        Ok(p) => p,
        Err(e) => return e.into_response(),
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "no-store")], bytes).into_response(),
        Err(_) => (StatusCode::NOT_FOUND, Json(json!({ "error": "image unavailable" }))).into_response(),
    }
}

/// API routes, plus static assets from `static_dir` for every other path.
pub fn router(state: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/datasets", get(datasets))
        .route("/api/pair", get(pair))
        .route("/api/vote", post(vote))
        .route("/api/results", get(results))
        .route("/api/image/{pair_id}/{side}", get(image))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
