//! HTTP JSON API under `/api/v1`.
//!
//! Handlers are thin: they parse, hand the work to [`SessionStore`] on the
//! blocking pool, and map its errors onto status codes.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cir_core::pipeline::RunConfig;
use cir_core::session::{NewQuery, PatchRequest, SessionError, SessionStore};
use cir_core::QueryMode;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;
use tower_http::trace::TraceLayer;
use tracing::info;

use crate::AppError;

pub const DEFAULT_SESSION_K: usize = 10;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    stage: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            stage: None,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        match e {
            SessionError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, message),
            SessionError::Conflict { .. } => ApiError::new(StatusCode::CONFLICT, message),
            SessionError::Invalid(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, message),
            SessionError::Upstream(s) => ApiError {
                status: StatusCode::BAD_GATEWAY,
                message,
                stage: Some(s.stage.to_string()),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(stage) = self.stage {
            body["stage"] = json!(stage);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Every malformed body is a 422, whatever went wrong with it.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid body: {e}")))
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, SessionError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Default, Deserialize)]
struct CreateSession {
    #[serde(default)]
    config: Option<RunConfig>,
}

#[derive(Debug, Serialize)]
struct Created {
    session_id: String,
}

async fn create_session(State(store): State<Arc<SessionStore>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = if body.is_empty() { CreateSession::default() } else { parse_body(&body)? };
    let config = req
        .config
        .unwrap_or_else(|| RunConfig::new(QueryMode::Cirevl, DEFAULT_SESSION_K));
    let session_id = blocking(move || store.create_session(config)).await?;
    Ok((StatusCode::CREATED, Json(Created { session_id })).into_response())
}

async fn submit_query(
    State(store): State<Arc<SessionStore>>,
    Path(sid): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let new: NewQuery = parse_body(&body)?;
    let view = blocking(move || store.submit(&sid, new)).await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_query(
    State(store): State<Arc<SessionStore>>,
    Path((sid, qid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let view = blocking(move || store.get(&sid, &qid)).await?;
    Ok(Json(view).into_response())
}

async fn patch_query(
    State(store): State<Arc<SessionStore>>,
    Path((sid, qid)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let patch: PatchRequest = parse_body(&body)?;
    let view = blocking(move || store.patch(&sid, &qid, patch)).await?;
    Ok(Json(view).into_response())
}

async fn history(
    State(store): State<Arc<SessionStore>>,
    Path((sid, qid)): Path<(String, String)>,
) -> ApiResult<Response> {
    let entries = blocking(move || store.history(&sid, &qid)).await?;
    Ok(Json(entries).into_response())
}

async fn image(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    let gallery = store.pipeline().gallery();
    let record = gallery
        .get(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image {id}")))?;
    let path = gallery
        .local_path(record)
        .filter(|p| p.is_file())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("image {id} has no local file")))?;
    let mime = mime_guess::from_path(&path).first_or_octet_stream();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, mime.essence_str().to_string())], bytes).into_response())
}

pub fn router(store: Arc<SessionStore>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{sid}/queries", post(submit_query))
        .route("/sessions/{sid}/queries/{qid}", get(get_query).patch(patch_query))
        .route("/sessions/{sid}/queries/{qid}/history", get(history))
        .route("/images/{id}", get(image))
        .with_state(store);
    let app = Router::new().nest("/api/v1", api);
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    };
    app.layer(TraceLayer::new_for_http())
}

/// Serves until Ctrl-C or SIGTERM.
pub async fn serve(addr: SocketAddr, store: Arc<SessionStore>, static_dir: Option<PathBuf>) -> Result<(), AppError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| AppError::Failed(format!("cannot listen on {addr}: {e}")))?;
    info!("listening on http://{}", listener.local_addr().map_err(|e| AppError::Failed(e.to_string()))?);
    eprintln!("listening on http://{addr}");
    axum::serve(listener, router(store, static_dir))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| AppError::Failed(e.to_string()))
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
