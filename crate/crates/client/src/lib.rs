//! Client for the live-session service: plain HTTP for health and single
//! requests, a WebSocket [`LiveChannel`] for streaming sessions.

use futures::{SinkExt, StreamExt};
use r2d2_core::corpus::{Condition, Speaker};
use r2d2_core::service::{EngineInfo, WireMessage};
use thiserror::Error;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("websocket: {0}")]
    Socket(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("protocol: {0}")]
    Protocol(String),
}

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub async fn health(&self) -> Result<EngineInfo, ClientError> {
        Ok(self
            .http
            .get(format!("{}/health", self.base))
            .send()
            .await?
            .json()
            .await?)
    }

    /// Sends one record and returns every reply to it.
    pub async fn send(&self, message: &WireMessage) -> Result<Vec<WireMessage>, ClientError> {
        Ok(self
            .http
            .post(format!("{}/v1/messages", self.base))
            .body(message.to_line())
            .send()
            .await?
            .json()
            .await?)
    }

    pub async fn connect(&self) -> Result<LiveChannel, ClientError> {
        let url = match self.base.split_once("://") {
            Some(("https", rest)) => format!("wss://{rest}/session"),
            Some((_, rest)) => format!("ws://{rest}/session"),
            None => format!("ws://{}/session", self.base),
        };
        let (ws, _) = tokio_tungstenite::connect_async(url).await?;
        Ok(LiveChannel { ws })
    }
}

/// A persistent session channel. Replies arrive in request order.
pub struct LiveChannel {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl LiveChannel {
    pub async fn send(&mut self, message: &WireMessage) -> Result<(), ClientError> {
        self.ws.send(Message::text(message.to_line())).await?;
        Ok(())
    }

    /// Next record from the server, `None` once the channel closes.
    pub async fn recv(&mut self) -> Result<Option<WireMessage>, ClientError> {
        while let Some(frame) = self.ws.next().await {
            match frame? {
                Message::Text(text) => {
                    return WireMessage::from_line(&text)
                        .map(Some)
                        .map_err(|e| ClientError::Protocol(e.to_string()))
                }
                Message::Close(_) => return Ok(None),
                _ => continue,
            }
        }
        Ok(None)
    }

    /// Opens a session and returns its id.
    pub async fn open(
        &mut self,
        inventory: Option<String>,
        top_n: Option<usize>,
        condition: Option<Condition>,
    ) -> Result<String, ClientError> {
        self.send(&WireMessage::Hello {
            inventory,
            top_n,
            condition,
        })
        .await?;
        match self.recv().await? {
            Some(WireMessage::Ack { session_id, .. }) => Ok(session_id),
            Some(WireMessage::Error { code, detail }) => Err(ClientError::Protocol(format!("{code:?}: {detail}"))),
            other => Err(ClientError::Protocol(format!("expected ack, got {other:?}"))),
        }
    }

    /// Streams a scripted session and closes it. Returns every server record
    /// after the opening ack, ending with the closing summary ack.
    pub async fn replay(
        &mut self,
        session_id: &str,
        turns: &[(Speaker, String)],
    ) -> Result<Vec<WireMessage>, ClientError> {
        for (speaker, text) in turns {
            self.send(&WireMessage::Turn {
                session_id: session_id.to_string(),
                speaker: *speaker,
                text: text.clone(),
            })
            .await?;
        }
        self.send(&WireMessage::End {
            session_id: session_id.to_string(),
        })
        .await?;
        let mut transcript = Vec::new();
        while let Some(message) = self.recv().await? {
            let done = matches!(&message, WireMessage::Ack { summary: Some(_), .. });
            transcript.push(message);
            if done {
                return Ok(transcript);
            }
        }
        Err(ClientError::Protocol(
            "channel closed before the session summary".into(),
        ))
    }

    pub async fn close(mut self) -> Result<(), ClientError> {
        self.ws.close(None).await?;
        Ok(())
    }
}
