//! HTTP routes over [`Service`].
//!
//! Participant routes:
//! - `POST /experiments/{id}/sessions?worker=TOKEN` enters or resumes a session
//! - `GET  /sessions/{sid}` returns the current step
//! - `POST /sessions/{sid}` submits the current step (`Idempotency-Key` header optional)
//! - `GET  /sessions/{sid}/stimuli/{slot}` and `/sessions/{sid}/hearing/{index}` stream audio
//!
//! Admin routes (bearer token):
//! - `POST /admin/experiments` with `{"config": ..., "manifest": ...}`
//! - `POST /admin/experiments/{id}/close`, `POST /admin/experiments/{id}/ban`
//! - `POST /admin/experiments/{id}/objective` with a delimited objective table
//! - `GET  /admin/experiments/{id}/export/{raw|clean|report}`
//! - `POST /admin/expire`

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower::ServiceExt;
use tower_http::services::ServeFile;

use crowdmushra_core::config::{ExperimentConfig, Manifest};
use crowdmushra_core::model::{ExperimentId, SlotLabel};

use crate::engine::{SessionId, StepPayload};
use crate::error::ServiceError;
use crate::events::AdminAction;
use crate::export::ExportFlavor;
use crate::Service;

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Service>,
    pub admin_token: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Gone(_) => StatusCode::GONE,
            ServiceError::Forbidden(_) => StatusCode::FORBIDDEN,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServiceError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/experiments/{id}/sessions", post(create_session))
        .route("/sessions/{sid}", get(current_step).post(submit_step))
        .route("/sessions/{sid}/stimuli/{slot}", get(stimulus))
        .route("/sessions/{sid}/hearing/{index}", get(hearing))
        .route("/admin/experiments", post(create_experiment))
        .route("/admin/experiments/{id}/close", post(close_experiment))
        .route("/admin/experiments/{id}/ban", post(ban_worker))
        .route("/admin/experiments/{id}/objective", post(load_objective))
        .route("/admin/experiments/{id}/export/{flavor}", get(export))
        .route("/admin/expire", post(expire))
        .with_state(state)
}

fn require_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ServiceError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match token {
        Some(t) if !state.admin_token.is_empty() && t == state.admin_token => Ok(()),
        _ => Err(ServiceError::Unauthorized),
    }
}

#[derive(Deserialize)]
struct EntryQuery {
    worker: String,
}

async fn create_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EntryQuery>,
) -> Result<Response, ServiceError> {
    let view = state.service.create_session(&ExperimentId::new(id), &q.worker)?;
    Ok(Json(view).into_response())
}

async fn current_step(State(state): State<AppState>, Path(sid): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(state.service.current_step(&SessionId(sid))?).into_response())
}

async fn submit_step(
    State(state): State<AppState>,
    Path(sid): Path<String>,
    headers: HeaderMap,
    Json(payload): Json<StepPayload>,
) -> Result<Response, ServiceError> {
    let key = headers
        .get("idempotency-key")
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    Ok(Json(state.service.submit(&SessionId(sid), key, payload)?).into_response())
}

async fn serve(path: std::path::PathBuf, req: Request) -> Result<Response, ServiceError> {
    if !path.is_file() {
        return Err(ServiceError::NotFound("audio file".into()));
    }
    let res = ServeFile::new(path)
        .oneshot(req)
        .await
        .map_err(|e| ServiceError::Storage(e.to_string()))?;
    Ok(res.map(Body::new))
}

async fn stimulus(
    State(state): State<AppState>,
    Path((sid, slot)): Path<(String, String)>,
    req: Request,
) -> Result<Response, ServiceError> {
    let path = state.service.stimulus_file(&SessionId(sid), &SlotLabel::new(slot))?;
    serve(path, req).await
}

async fn hearing(
    State(state): State<AppState>,
    Path((sid, index)): Path<(String, usize)>,
    req: Request,
) -> Result<Response, ServiceError> {
    let path = state.service.hearing_file(&SessionId(sid), index)?;
    serve(path, req).await
}

#[derive(Deserialize)]
struct NewExperiment {
    config: ExperimentConfig,
    manifest: Manifest,
}

async fn create_experiment(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(body): Json<NewExperiment>,
) -> Result<Response, ServiceError> {
    require_admin(&state, &headers)?;
    state.service.create_experiment(body.config, body.manifest)?;
    Ok(StatusCode::CREATED.into_response())
}

async fn close_experiment(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    require_admin(&state, &headers)?;
    state.service.admin(&ExperimentId::new(id), AdminAction::CloseExperiment)?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

#[derive(Deserialize)]
struct Ban {
    worker: String,
}

async fn ban_worker(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(ban): Json<Ban>,
) -> Result<Response, ServiceError> {
    require_admin(&state, &headers)?;
    state
        .service
        .admin(&ExperimentId::new(id), AdminAction::BanWorker { worker: ban.worker })?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn load_objective(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    table: String,
) -> Result<Response, ServiceError> {
    require_admin(&state, &headers)?;
    state
        .service
        .admin(&ExperimentId::new(id), AdminAction::LoadObjective { table })?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn export(
    State(state): State<AppState>,
    headers: HeaderMap,
    Path((id, flavor)): Path<(String, String)>,
) -> Result<Response, ServiceError> {
    require_admin(&state, &headers)?;
    let flavor: ExportFlavor = flavor.parse()?;
    let (body, media) = state.service.export(&ExperimentId::new(id), flavor)?;
    Ok(([(header::CONTENT_TYPE, media)], body).into_response())
}

async fn expire(State(state): State<AppState>, headers: HeaderMap) -> Result<Response, ServiceError> {
    require_admin(&state, &headers)?;
    let n = state.service.expire_idle()?;
    Ok(Json(serde_json::json!({ "expired": n })).into_response())
}
