//! HTTP front end for [`SessionEngine`].
//!
//! - `GET /health`: engine status and loaded-model metadata.
//! - `GET /session`: WebSocket carrying newline-delimited wire records; every
//!   inbound record is answered in order, one record per outbound frame.
//! - `POST /v1/messages`: one wire record in, the JSON array of replies out.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use r2d2_core::service::{EngineInfo, ServiceError, SessionEngine, WireMessage};
use tokio::net::TcpListener;

pub fn router(engine: Arc<SessionEngine>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", get(session))
        .route("/v1/messages", post(message))
        .with_state(engine)
}

/// Serves until the listener fails or the task is dropped.
pub async fn serve(listener: TcpListener, engine: Arc<SessionEngine>) -> std::io::Result<()> {
    axum::serve(listener, router(engine)).await
}

/// Binds `addr` and serves in a background task; returns the bound address.
pub async fn spawn(addr: SocketAddr, engine: Arc<SessionEngine>) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let bound = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener, engine).await {
            tracing::error!("server stopped: {e}");
        }
    });
    Ok(bound)
}

async fn health(State(engine): State<Arc<SessionEngine>>) -> Json<EngineInfo> {
    Json(engine.info())
}

async fn message(State(engine): State<Arc<SessionEngine>>, body: String) -> Response {
    match WireMessage::from_line(&body) {
        Ok(msg) => Json(handle(&engine, msg).await).into_response(),
        Err(e) => (StatusCode::BAD_REQUEST, Json(vec![e.to_message()])).into_response(),
    }
}

async fn session(State(engine): State<Arc<SessionEngine>>, upgrade: WebSocketUpgrade) -> Response {
    upgrade.on_upgrade(move |socket| channel(engine, socket))
}

async fn handle(engine: &Arc<SessionEngine>, msg: WireMessage) -> Vec<WireMessage> {
    let engine = Arc::clone(engine);
    tokio::task::spawn_blocking(move || engine.handle(msg))
        .await
        .unwrap_or_else(|e| vec![ServiceError::BadMessage(format!("handler failed: {e}")).to_message()])
}

async fn channel(engine: Arc<SessionEngine>, socket: WebSocket) {
    let (mut tx, mut rx) = socket.split();
    while let Some(Ok(frame)) = rx.next().await {
        let text = match frame {
            Message::Text(text) => text.to_string(),
            Message::Binary(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Message::Close(_) => break,
            _ => continue,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let replies = match WireMessage::from_line(line) {
                Ok(msg) => handle(&engine, msg).await,
                Err(e) => vec![e.to_message()],
            };
            for reply in replies {
                if tx.send(Message::Text(reply.to_line().into())).await.is_err() {
                    return;
                }
            }
        }
    }
}
