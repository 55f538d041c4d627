//! HTTP front end of the session service.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use npiseg_core::model::Click;
use npiseg_core::service::{CreateSession, ServiceError, SessionManager};
use serde_json::json;

pub struct ApiError(ServiceError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

type Shared = Arc<SessionManager>;
type ApiResult = Result<Response, ApiError>;

/// Inference is CPU-bound, so it runs off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Internal(e.to_string())))?
        .map_err(ApiError)
}

/// Accepts a JSON `CreateSession` body or a bare `NPSC1` document.
async fn create_session(State(m): State<Shared>, body: String) -> ApiResult {
    let req = if body.trim_start().starts_with('{') {
        serde_json::from_str::<CreateSession>(&body)
            .map_err(|e| ServiceError::BadRequest(format!("bad session request: {e}")))?
    } else {
        CreateSession {
            scene_id: None,
            scene: Some(body),
        }
    };
    let created = blocking(move || m.create_session(req)).await?;
    Ok(Json(created).into_response())
}

async fn add_click(State(m): State<Shared>, Path(id): Path<String>, body: String) -> ApiResult {
    let click: Click =
        serde_json::from_str(&body).map_err(|e| ServiceError::InvalidClick(format!("bad click body: {e}")))?;
    let p = blocking(move || m.add_click(&id, click)).await?;
    Ok(Json(p).into_response())
}

async fn undo(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult {
    let p = blocking(move || m.undo(&id)).await?;
    Ok(Json(p).into_response())
}

async fn get_session(State(m): State<Shared>, Path(id): Path<String>) -> ApiResult {
    Ok(Json(m.get_session(&id)?).into_response())
}

async fn list_scenes(State(m): State<Shared>) -> Response {
    Json(m.scenes()).into_response()
}

pub fn router(manager: Shared) -> Router {
    Router::new()
        .route("/scenes", get(list_scenes))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/undo", post(undo))
        .with_state(manager)
}

pub async fn serve(manager: SessionManager, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(manager))).await
}
