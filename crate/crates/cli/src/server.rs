use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use skt_core::service::SessionStore;
use skt_core::Error;

pub struct ApiError(StatusCode, &'static str, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::NotFound(_) => ApiError(StatusCode::NOT_FOUND, "not_found", e.to_string()),
            Error::InvalidInput(_) => ApiError(StatusCode::BAD_REQUEST, "invalid_input", e.to_string()),
            _ => ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, "invalid_body", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "detail": self.2}))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
struct CreateSession {
    topic: Option<String>,
    pool: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct PostMessage {
    text: String,
}

type Store = State<Arc<SessionStore>>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, Error> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn create(State(st): Store, body: Result<Json<CreateSession>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let info = blocking(move || st.create_session(req.topic.as_deref(), req.pool.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn message(
    State(st): Store,
    Path(id): Path<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let r = blocking(move || st.post_message(&id, &req.text)).await?;
    Ok(Json(r).into_response())
}

async fn transcript(State(st): Store, Path(id): Path<String>) -> Result<Response, ApiError> {
    let t = blocking(move || st.get_transcript(&id)).await?;
    Ok(Json(t).into_response())
}

async fn delete(State(st): Store, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    blocking(move || st.delete_session(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(transcript).delete(delete))
        .route("/sessions/{id}/messages", post(message))
        .with_state(store)
}

pub async fn serve(store: Arc<SessionStore>, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
