//! Deterministic mock inference server: serves the chat-completions
//! contract from an image_ref-keyed script over real HTTP and records every
//! request for assertions.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::sync::oneshot;

use crate::client::ClientError;
use crate::wire::{InferenceRequest, InferenceResponse, WireError, CHAT_COMPLETIONS_PATH};

struct ServerState {
    script: BTreeMap<String, String>,
    log: Mutex<Vec<InferenceRequest>>,
}

async fn chat_completions(
    State(state): State<Arc<ServerState>>,
    Json(request): Json<InferenceRequest>,
) -> Response {
    state.log.lock().unwrap().push(request.clone());
    let scripted = request
        .image_ref()
        .and_then(|image_ref| state.script.get(image_ref));
    match scripted {
        Some(text) => Json(InferenceResponse::canned(&request.request_id, text)).into_response(),
        None => (
            StatusCode::NOT_FOUND,
            Json(WireError {
                error: format!(
                    "image_ref {:?} not scripted",
                    request.image_ref().unwrap_or("<none>")
                ),
            }),
        )
            .into_response(),
    }
}

/// Running server; shuts down when dropped.
pub struct MockServerHandle {
    addr: SocketAddr,
    state: Arc<ServerState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl MockServerHandle {
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn request_log(&self) -> Vec<InferenceRequest> {
        self.state.log.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.log.lock().unwrap().len()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for MockServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts the mock server on 127.0.0.1:`port` (0 picks a free port).
pub fn mock_inference_server(
    script: BTreeMap<String, String>,
    port: u16,
) -> Result<MockServerHandle, ClientError> {
    // Bind synchronously so a busy port surfaces before the handle exists.
    let listener = std::net::TcpListener::bind(("127.0.0.1", port)).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            ClientError::PortInUse { port }
        } else {
            ClientError::ServerStart { reason: e.to_string() }
        }
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|e| ClientError::ServerStart { reason: e.to_string() })?;
    let addr = listener
        .local_addr()
        .map_err(|e| ClientError::ServerStart { reason: e.to_string() })?;

    let state = Arc::new(ServerState {
        script,
        log: Mutex::new(Vec::new()),
    });
    let app_state = Arc::clone(&state);
    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();

    let thread = std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        runtime.block_on(async move {
            let app = Router::new()
                .route(CHAT_COMPLETIONS_PATH, post(chat_completions))
                .with_state(app_state);
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                })
                .await
                .expect("serve");
        });
    });

    Ok(MockServerHandle {
        addr,
        state,
        shutdown: Some(shutdown_tx),
        thread: Some(thread),
    })
}

/// Loads a script file: a JSON object mapping image_ref to response text.
pub fn load_script(path: &std::path::Path) -> Result<BTreeMap<String, String>, std::io::Error> {
    let contents = std::fs::read_to_string(path)?;
    serde_json::from_str(&contents)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}
