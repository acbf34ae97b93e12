//! HTTP routes over a shared [`Store`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{FromRequestParts, Path, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use mslayout_core::corpus::{render_annotations, RegionInstance};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::store::{AnnotatorAccount, Mode, Store, Submission};
use crate::{Result, ServiceError};

type Shared = Arc<Store>;

/// The annotator identified by the request's bearer token.
pub struct Annotator(pub AnnotatorAccount);

impl FromRequestParts<Shared> for Annotator {
    type Rejection = ServiceError;

    async fn from_request_parts(parts: &mut Parts, store: &Shared) -> Result<Self> {
        let token = parts
            .headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(ServiceError::Unauthorized)?;
        store.authenticate(token.trim()).map(Annotator)
    }
}

#[derive(Deserialize)]
struct RegisterBody {
    name: String,
}

#[derive(Deserialize)]
struct SubmitBody {
    mode: Mode,
    #[serde(default)]
    session_id: Option<String>,
    regions: Vec<Value>,
}

async fn register(State(store): State<Shared>, Json(body): Json<RegisterBody>) -> Result<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(store.register(&body.name)?)))
}

async fn open_session(State(store): State<Shared>, Annotator(who): Annotator) -> Result<impl IntoResponse> {
    Ok((StatusCode::CREATED, Json(store.open_session(&who.annotator_id)?)))
}

async fn close_session(
    State(store): State<Shared>,
    Annotator(who): Annotator,
    Path(id): Path<String>,
) -> Result<impl IntoResponse> {
    Ok(Json(store.close_session(&who.annotator_id, &id)?))
}

async fn documents(State(store): State<Shared>) -> impl IntoResponse {
    Json(store.documents())
}

async fn image(State(store): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse> {
    let path = store.image_path(&id)?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ServiceError::NotFound(format!("image for {id}")),
        _ => ServiceError::Io {
            path: path.display().to_string(),
            source: e,
        },
    })?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("tif" | "tiff") => "image/tiff",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes))
}

async fn current(State(store): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse> {
    let current = store.current(&id)?;
    Ok(Json(json!({ "doc_id": id, "current": current })))
}

async fn history(State(store): State<Shared>, Path(id): Path<String>) -> Result<impl IntoResponse> {
    Ok(Json(store.history(&id)?))
}

async fn submit(
    State(store): State<Shared>,
    Annotator(who): Annotator,
    Path(id): Path<String>,
    Json(body): Json<SubmitBody>,
) -> Result<impl IntoResponse> {
    let regions = body
        .regions
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            serde_json::from_value::<RegionInstance>(v).map_err(|e| ServiceError::InvalidRegion {
                index,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rev = store.submit(
        &who.annotator_id,
        &id,
        Submission {
            mode: body.mode,
            session_id: body.session_id,
            regions,
        },
    )?;
    Ok((StatusCode::CREATED, Json(rev)))
}

async fn analytics(State(store): State<Shared>) -> impl IntoResponse {
    Json(store.analytics())
}

async fn sessions(State(store): State<Shared>) -> impl IntoResponse {
    Json(store.sessions())
}

async fn export(State(store): State<Shared>) -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "application/json")],
        render_annotations(&store.export()),
    )
}

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/annotators", post(register))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", delete(close_session))
        .route("/documents", get(documents))
        .route("/documents/{id}/image", get(image))
        .route("/documents/{id}/annotation", get(current).put(submit))
        .route("/documents/{id}/history", get(history))
        .route("/analytics/summary", get(analytics))
        .route("/analytics/sessions", get(sessions))
        .route("/export", get(export))
        .with_state(store)
}

/// Serves the API on `addr` until the process is stopped.
pub async fn serve(store: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}
