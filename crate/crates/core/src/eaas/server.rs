use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use thiserror::Error;
use tokio::sync::oneshot;

use super::wire::{self, EmbedRequest, EmbedResponse, ErrorBody, WireInfo, PROTOCOL_VERSION};
use crate::encoder::EmbeddingProvider;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("address {addr} is already in use")]
    AddrInUse { addr: String },
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("invalid provider: {0}")]
    Provider(String),
    #[error("server runtime failed: {0}")]
    Runtime(String),
}

struct AppState {
    provider: Arc<dyn EmbeddingProvider>,
    info: WireInfo,
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    let body = ErrorBody {
        error: code.into(),
        message: message.into(),
        server_version: (status == StatusCode::UPGRADE_REQUIRED).then_some(PROTOCOL_VERSION),
    };
    (status, Json(body)).into_response()
}

async fn info(State(s): State<Arc<AppState>>) -> Json<WireInfo> {
    Json(s.info.clone())
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn embed(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: EmbedRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, wire::ERR_MALFORMED_JSON, e.to_string()),
    };
    if req.version != PROTOCOL_VERSION {
        return error(
            StatusCode::UPGRADE_REQUIRED,
            wire::ERR_VERSION_MISMATCH,
            format!("client speaks version {}, server speaks {PROTOCOL_VERSION}", req.version),
        );
    }
    let mut samples = Vec::with_capacity(req.samples.len());
    for (i, enc) in req.samples.iter().enumerate() {
        match wire::decode_f64s(enc) {
            Ok(v) => samples.push(v),
            Err(e) => return error(StatusCode::BAD_REQUEST, wire::ERR_BAD_PAYLOAD, format!("sample {i}: {e}")),
        }
    }
    let m = s.info.input_shape.numel();
    if req.shape != s.info.input_shape {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            wire::ERR_SHAPE_MISMATCH,
            format!("declared shape {:?}, served shape {:?}", req.shape, s.info.input_shape),
        );
    }
    if let Some((i, v)) = samples.iter().enumerate().find(|(_, v)| v.len() != m) {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            wire::ERR_SHAPE_MISMATCH,
            format!("sample {i} has {} values, expected {m}", v.len()),
        );
    }

    let provider = s.provider.clone();
    let result = tokio::task::spawn_blocking(move || {
        let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
        provider.embed_batch(&refs)
    })
    .await;
    let embeddings = match result {
        Ok(Ok(e)) => e,
        Ok(Err(e)) => return error(StatusCode::INTERNAL_SERVER_ERROR, wire::ERR_MODEL, e.to_string()),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, wire::ERR_MODEL, e.to_string()),
    };
    Json(EmbedResponse {
        version: PROTOCOL_VERSION,
        request_id: req.request_id,
        n: s.info.n,
        embeddings: embeddings.iter().map(|e| wire::encode_f64s(e)).collect(),
    })
    .into_response()
}

fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/info", get(info))
        .route("/v1/health", get(health))
        .route("/v1/embed", post(embed))
        .with_state(state)
}

/// A running server. Dropping the handle shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), String>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections, drains in-flight requests and joins the
    /// server thread.
    pub fn shutdown(mut self) -> Result<(), ServeError> {
        self.stop()
    }

    /// Blocks until SIGINT or SIGTERM, then shuts down.
    pub fn wait_for_signal(self) -> Result<(), ServeError> {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(|e| ServeError::Runtime(e.to_string()))?;
        rt.block_on(async {
            #[cfg(unix)]
            {
                use tokio::signal::unix::{signal, SignalKind};
                let mut term = signal(SignalKind::terminate()).map_err(|e| ServeError::Runtime(e.to_string()))?;
                tokio::select! {
                    r = tokio::signal::ctrl_c() => r.map_err(|e| ServeError::Runtime(e.to_string())),
                    _ = term.recv() => Ok(()),
                }
            }
            #[cfg(not(unix))]
            tokio::signal::ctrl_c().await.map_err(|e| ServeError::Runtime(e.to_string()))
        })?;
        self.shutdown()
    }

    fn stop(&mut self) -> Result<(), ServeError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take().map(JoinHandle::join) {
            None => Ok(()),
            Some(Ok(r)) => r.map_err(ServeError::Runtime),
            Some(Err(_)) => Err(ServeError::Runtime("server thread panicked".into())),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Serves `provider` on `addr` (e.g. `127.0.0.1:0`) from a background thread.
pub fn serve(provider: Arc<dyn EmbeddingProvider>, addr: &str) -> Result<ServerHandle, ServeError> {
    provider.info().validate().map_err(|e| ServeError::Provider(e.to_string()))?;
    let listener = std::net::TcpListener::bind(addr).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServeError::AddrInUse { addr: addr.into() },
        _ => ServeError::Bind {
            addr: addr.into(),
            message: e.to_string(),
        },
    })?;
    let local = listener.local_addr().map_err(|e| ServeError::Runtime(e.to_string()))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| ServeError::Runtime(e.to_string()))?;
    let state = Arc::new(AppState {
        info: WireInfo::from(provider.info()),
        provider,
    });
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new()
        .name(format!("eaas-{local}"))
        .spawn(move || -> Result<(), String> {
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .map_err(|e| e.to_string())?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).map_err(|e| e.to_string())?;
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .map_err(|e| e.to_string())
            })
        })
        .map_err(|e| ServeError::Runtime(e.to_string()))?;
    log::info!("serving embeddings on http://{local}");
    Ok(ServerHandle {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
