//! Axum routes over the service handlers.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tower_http::cors::{Any, CorsLayer};

use crate::service::{
    handle_explain, handle_point, handle_retrieve, image_png, list_images, ExplainRequest,
    PointRequest, RetrieveRequest, ServiceError,
};
use crate::workspace::Workspace;

type Shared = Arc<Workspace>;

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    code: &'static str,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status =
            StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            error: self.to_string(),
            code: self.code(),
        };
        (status, Json(body)).into_response()
    }
}

async fn blocking<T, F>(ws: Shared, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&Workspace) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&ws))
        .await
        .map_err(|e| ServiceError::Render(format!("worker panicked: {e}")))?
}

async fn images(State(ws): State<Shared>) -> impl IntoResponse {
    Json(list_images(&ws))
}

async fn explain(State(ws): State<Shared>, Json(req): Json<ExplainRequest>) -> Response {
    match blocking(ws, move |ws| handle_explain(ws, &req)).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn point(State(ws): State<Shared>, Json(req): Json<PointRequest>) -> Response {
    match blocking(ws, move |ws| handle_point(ws, &req)).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn retrieve(State(ws): State<Shared>, Json(req): Json<RetrieveRequest>) -> Response {
    match blocking(ws, move |ws| handle_retrieve(ws, &req)).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn image(State(ws): State<Shared>, Path(id): Path<String>) -> Response {
    match blocking(ws, move |ws| image_png(ws, &id)).await {
        Ok(png) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Err(e) => e.into_response(),
    }
}

pub fn router(ws: Shared) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    Router::new()
        .route("/api/images", get(images))
        .route("/api/explain", post(explain))
        .route("/api/point", post(point))
        .route("/api/retrieve", post(retrieve))
        .route("/api/image/{id}", get(image))
        .layer(cors)
        .with_state(ws)
}

/// Serves until ctrl-c; in-flight requests are allowed to finish.
pub async fn serve(ws: Workspace, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(ws)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
}
