//! Inference clients: an HTTP client with retry/backoff and a scripted
//! in-process mock. Batch dispatch runs under a bounded worker pool and
//! reassembles responses in request order.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::wire::{InferenceRequest, InferenceResponse, CHAT_COMPLETIONS_PATH};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("service unavailable after {attempts} attempts: {reason}")]
    ServiceUnavailable { attempts: u32, reason: String },
    #[error("protocol error: {reason}")]
    Protocol { reason: String },
    #[error("port {port} already in use")]
    PortInUse { port: u16 },
    #[error("server failed to start: {reason}")]
    ServerStart { reason: String },
}

pub trait InferenceClient: Send + Sync {
    fn infer(&self, request: &InferenceRequest) -> Result<InferenceResponse, ClientError>;
}

/// Blocking HTTP client for the chat-completions contract. Connection and
/// 5xx failures retry with exponential backoff; 4xx responses do not.
pub struct HttpInferenceClient {
    endpoint: String,
    http: reqwest::blocking::Client,
    attempts: u32,
    base_backoff: Duration,
}

impl HttpInferenceClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpInferenceClient {
            endpoint: endpoint.into(),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(10))
                .build()
                .expect("http client"),
            attempts: 3,
            base_backoff: Duration::from_millis(50),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client");
        self
    }

    fn url(&self) -> String {
        format!(
            "{}{}",
            self.endpoint.trim_end_matches('/'),
            CHAT_COMPLETIONS_PATH
        )
    }
}

impl InferenceClient for HttpInferenceClient {
    fn infer(&self, request: &InferenceRequest) -> Result<InferenceResponse, ClientError> {
        let mut last_error: Option<ClientError> = None;
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.base_backoff * 2u32.pow(attempt - 1));
            }
            match self.http.post(self.url()).json(request).send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let parsed: InferenceResponse =
                            response.json().map_err(|e| ClientError::Protocol {
                                reason: format!("malformed response body: {e}"),
                            })?;
                        if parsed.request_id != request.request_id {
                            return Err(ClientError::Protocol {
                                reason: format!(
                                    "response id {} does not match request id {}",
                                    parsed.request_id, request.request_id
                                ),
                            });
                        }
                        return Ok(parsed);
                    }
                    if status.is_client_error() {
                        let body = response.text().unwrap_or_default();
                        return Err(ClientError::Protocol {
                            reason: format!("{status}: {body}"),
                        });
                    }
                    last_error = Some(ClientError::ServiceUnavailable {
                        attempts: attempt + 1,
                        reason: status.to_string(),
                    });
                }
                Err(e) if e.is_timeout() => {
                    last_error = Some(ClientError::Timeout {
                        attempts: attempt + 1,
                    });
                }
                Err(e) => {
                    last_error = Some(ClientError::ServiceUnavailable {
                        attempts: attempt + 1,
                        reason: e.to_string(),
                    });
                }
            }
        }
        Err(match last_error {
            Some(ClientError::Timeout { .. }) => ClientError::Timeout {
                attempts: self.attempts,
            },
            Some(ClientError::ServiceUnavailable { reason, .. }) => {
                ClientError::ServiceUnavailable {
                    attempts: self.attempts,
                    reason,
                }
            }
            other => other.unwrap_or(ClientError::ServiceUnavailable {
                attempts: self.attempts,
                reason: "no attempts made".to_string(),
            }),
        })
    }
}

/// In-process deterministic double: answers from an image_ref-keyed script
/// and records every request.
pub struct MockInferenceClient {
    script: BTreeMap<String, String>,
    log: Mutex<Vec<String>>,
}

impl MockInferenceClient {
    pub fn new(script: BTreeMap<String, String>) -> Self {
        MockInferenceClient {
            script,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn request_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

impl InferenceClient for MockInferenceClient {
    fn infer(&self, request: &InferenceRequest) -> Result<InferenceResponse, ClientError> {
        let image_ref = request.image_ref().ok_or(ClientError::Protocol {
            reason: "request carries no image_ref".to_string(),
        })?;
        self.log.lock().unwrap().push(image_ref.to_string());
        let text = self.script.get(image_ref).ok_or(ClientError::Protocol {
            reason: format!("404: image_ref {image_ref} not scripted"),
        })?;
        Ok(InferenceResponse::canned(&request.request_id, text))
    }
}

/// Dispatches the batch with at most `limit` requests in flight. The result
/// vector is indexed exactly like `requests`, regardless of completion
/// order.
pub fn infer_batch<C: InferenceClient + ?Sized>(
    client: &C,
    requests: &[InferenceRequest],
    limit: usize,
) -> Vec<Result<InferenceResponse, ClientError>> {
    let workers = limit.max(1).min(requests.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<InferenceResponse, ClientError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= requests.len() {
                    break;
                }
                let result = client.infer(&requests[index]);
                *slots[index].lock().unwrap() = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}
