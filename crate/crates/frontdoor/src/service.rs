//! HTTP interface over a [`SessionStore`].
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | `POST` | `/sessions` | [`SessionSpec`] | `201 {session_id}` |
//! | `GET` | `/sessions` | | `{sessions: [id]}` |
//! | `POST` | `/sessions/{id}/solve` | [`SolveRequest`] | `202` [`StatusView`] |
//! | `GET` | `/sessions/{id}/status` | | [`StatusView`] |
//! | `PATCH` | `/sessions/{id}/assumptions` | [`OverlayPatch`] | [`Overlay`] |
//! | `POST` | `/sessions/{id}/resolve` | [`ResolveRequest`] | `202` [`StatusView`] |
//! | `GET` | `/sessions/{id}/plan` | | [`PlanView`] |
//! | `GET` | `/sessions/{id}/history` | | [`HistoryView`] |
//!
//! Errors are `{ "error": message }` with 404 for unknown sessions, 409 when a
//! run is active or a warm start has no plan to start from, and 422 for
//! invalid overlays or bodies. Before the first run `/plan` reports the
//! no-expansion plan with a null `iteration`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::session::{
    HistoryView, Job, PlanView, ResolveRequest, SessionError, SessionSpec, SessionStore, SolveRequest, StatusView,
};
use crate::study::{Overlay, OverlayPatch, StudyError};

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let code = match &e {
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::Invalid(_) | SessionError::Study(StudyError::Overlay(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Study(StudyError::Io(_) | StudyError::Network(_) | StudyError::Scenario(_)) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            SessionError::Study(_) | SessionError::Persist(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Store = Arc<SessionStore>;

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

pub fn router(store: Store) -> Router {
    Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}/solve", post(solve))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/assumptions", patch(assumptions))
        .route("/sessions/{id}/resolve", post(resolve))
        .route("/sessions/{id}/plan", get(plan))
        .route("/sessions/{id}/history", get(history))
        .with_state(store)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

async fn create(State(store): State<Store>, body: Result<Json<SessionSpec>, JsonRejection>) -> ApiResult<(StatusCode, Json<Created>)> {
    let Json(spec) = body?;
    let session = blocking(move || store.create(spec)).await??;
    Ok((
        StatusCode::CREATED,
        Json(Created {
            session_id: session.id.clone(),
        }),
    ))
}

async fn list(State(store): State<Store>) -> Json<serde_json::Value> {
    Json(json!({ "sessions": store.ids() }))
}

fn launch(job: Job) -> (StatusCode, Json<StatusView>) {
    let view = job.session().status();
    tokio::task::spawn_blocking(move || job.execute());
    (StatusCode::ACCEPTED, Json(view))
}

/// Run requests may omit the body entirely.
fn optional_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

async fn solve(State(store): State<Store>, Path(id): Path<String>, body: Bytes) -> ApiResult<(StatusCode, Json<StatusView>)> {
    let req: SolveRequest = optional_body(&body)?;
    Ok(launch(store.begin_solve(&id, req)?))
}

async fn resolve(State(store): State<Store>, Path(id): Path<String>, body: Bytes) -> ApiResult<(StatusCode, Json<StatusView>)> {
    let req: ResolveRequest = optional_body(&body)?;
    Ok(launch(store.begin_resolve(&id, req)?))
}

async fn status(State(store): State<Store>, Path(id): Path<String>) -> ApiResult<Json<StatusView>> {
    Ok(Json(store.get(&id)?.status()))
}

async fn assumptions(
    State(store): State<Store>,
    Path(id): Path<String>,
    body: Result<Json<OverlayPatch>, JsonRejection>,
) -> ApiResult<Json<Overlay>> {
    let Json(p) = body?;
    Ok(Json(store.patch(&id, &p)?))
}

async fn plan(State(store): State<Store>, Path(id): Path<String>) -> ApiResult<Json<PlanView>> {
    Ok(Json(store.get(&id)?.plan()?))
}

async fn history(State(store): State<Store>, Path(id): Path<String>) -> ApiResult<Json<HistoryView>> {
    Ok(Json(store.get(&id)?.history()))
}
