//! OpenAI-compatible chat-completions client with retry, backoff and a
//! per-endpoint concurrency cap.

pub mod stub;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use stub::{make_stub_endpoint, KeyedRule, StubReply, StubScript, StubServer, StubStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 1.0,
            max_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_concurrent: usize,
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub max_retries: u32,
    /// Delay before retry `n` is `backoff[min(n, len) - 1]`; empty means no delay.
    #[serde(with = "millis_vec")]
    pub backoff: Vec<Duration>,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_concurrent: 8,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: vec![
                Duration::from_millis(500),
                Duration::from_secs(1),
                Duration::from_secs(2),
            ],
        }
    }
}

impl Limits {
    fn delay_before_retry(&self, retry: u32) -> Duration {
        if self.backoff.is_empty() || retry == 0 {
            return Duration::ZERO;
        }
        let idx = (retry as usize).min(self.backoff.len()) - 1;
        self.backoff[idx]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    pub decoding: Decoding,
    pub limits: Limits,
    /// Environment variable holding a bearer token. Defaults to
    /// `<NAME>_API_KEY` with non-alphanumerics mapped to `_`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl ModelEndpoint {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        ModelEndpoint {
            name: name.into(),
            base_url: base_url.into(),
            model_id: model_id.into(),
            decoding: Decoding::default(),
            limits: Limits::default(),
            api_key_env: None,
        }
    }

    pub fn api_key_var(&self) -> String {
        self.api_key_env
            .clone()
            .unwrap_or_else(|| default_api_key_var(&self.name))
    }

    pub fn completions_url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

pub fn default_api_key_var(endpoint_name: &str) -> String {
    let stem: String = endpoint_name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("{stem}_API_KEY")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Timeouts, connection failures, HTTP 429 and 5xx. Retried.
    Transient,
    /// HTTP 4xx other than 429. Never retried.
    Request,
    /// The reply was not a chat-completion document.
    Protocol,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorKind::Transient => "transient",
            ErrorKind::Request => "request",
            ErrorKind::Protocol => "protocol",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptFailure {
    pub attempt: u32,
    pub kind: ErrorKind,
    pub message: String,
    pub latency_ms: u64,
    pub timestamp: DateTime<Utc>,
}

/// One successful request/reply pair plus every failed attempt before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionExchange {
    pub endpoint_name: String,
    pub system_text: String,
    pub user_text: String,
    pub raw_response: String,
    pub latency_ms: u64,
    pub attempt: u32,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_attempts: Vec<AttemptFailure>,
}

#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
#[error("{endpoint}: {kind} error after {attempts} attempt(s): {message}")]
pub struct ClientError {
    pub endpoint: String,
    pub kind: ErrorKind,
    pub attempts: u32,
    pub message: String,
    pub failed_attempts: Vec<AttemptFailure>,
}

impl ClientError {
    pub fn exhausted(&self) -> bool {
        self.kind == ErrorKind::Transient
    }
}

/// Chat-completions client bound to one endpoint. Cheap to clone; clones
/// share the concurrency cap.
#[derive(Clone)]
pub struct ChatClient {
    endpoint: Arc<ModelEndpoint>,
    http: reqwest::Client,
    permits: Arc<Semaphore>,
    api_key: Option<String>,
}

impl fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatClient")
            .field("endpoint", &self.endpoint.name)
            .finish_non_exhaustive()
    }
}

impl ChatClient {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .timeout(endpoint.limits.timeout)
            .build()
            .map_err(|e| ClientError {
                endpoint: endpoint.name.clone(),
                kind: ErrorKind::Request,
                attempts: 0,
                message: format!("cannot build http client: {e}"),
                failed_attempts: Vec::new(),
            })?;
        let api_key = std::env::var(endpoint.api_key_var()).ok();
        let permits = Arc::new(Semaphore::new(endpoint.limits.max_concurrent.max(1)));
        Ok(ChatClient {
            endpoint: Arc::new(endpoint),
            http,
            permits,
            api_key,
        })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Sends one chat completion. `seed`, when given, is forwarded as the
    /// request's `seed` field.
    pub async fn complete(
        &self,
        system_text: &str,
        user_text: &str,
        seed: Option<u64>,
    ) -> Result<CompletionExchange, ClientError> {
        let ep = &self.endpoint;
        let body = request_body(ep, system_text, user_text, seed);
        let mut failures: Vec<AttemptFailure> = Vec::new();
        let total = ep.limits.max_retries + 1;

        for attempt in 1..=total {
            if attempt > 1 {
                let delay = ep.limits.delay_before_retry(attempt - 1);
                if !delay.is_zero() {
                    tokio::time::sleep(delay).await;
                }
            }
            let timestamp = Utc::now();
            let started = Instant::now();
            let result = {
                let _permit = self.permits.acquire().await.expect("semaphore never closed");
                self.send_once(&body).await
            };
            let latency_ms = started.elapsed().as_millis() as u64;
            match result {
                Ok(raw_response) => {
                    return Ok(CompletionExchange {
                        endpoint_name: ep.name.clone(),
                        system_text: system_text.to_string(),
                        user_text: user_text.to_string(),
                        raw_response,
                        latency_ms,
                        attempt,
                        timestamp,
                        failed_attempts: failures,
                    })
                }
                Err((kind, message)) => {
                    tracing::debug!(endpoint = %ep.name, attempt, %kind, %message, "attempt failed");
                    failures.push(AttemptFailure {
                        attempt,
                        kind,
                        message: message.clone(),
                        latency_ms,
                        timestamp,
                    });
                    if kind != ErrorKind::Transient || attempt == total {
                        return Err(ClientError {
                            endpoint: ep.name.clone(),
                            kind,
                            attempts: attempt,
                            message,
                            failed_attempts: failures,
                        });
                    }
                }
            }
        }
        unreachable!("loop returns on the final attempt")
    }

    async fn send_once(&self, body: &Value) -> Result<String, (ErrorKind, String)> {
        let mut req = self.http.post(self.endpoint.completions_url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            let what = if e.is_timeout() { "timeout" } else { "transport error" };
            (ErrorKind::Transient, format!("{what}: {e}"))
        })?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| {
            let what = if e.is_timeout() { "timeout" } else { "body read error" };
            (ErrorKind::Transient, format!("{what}: {e}"))
        })?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err((ErrorKind::Transient, format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err((ErrorKind::Request, format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        extract_content(&text).map_err(|m| (ErrorKind::Protocol, m))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub fn request_body(ep: &ModelEndpoint, system_text: &str, user_text: &str, seed: Option<u64>) -> Value {
    let mut messages = Vec::new();
    if !system_text.is_empty() {
        messages.push(json!({"role": "system", "content": system_text}));
    }
    messages.push(json!({"role": "user", "content": user_text}));
    let mut body = json!({
        "model": ep.model_id,
        "messages": messages,
        "temperature": ep.decoding.temperature,
        "max_tokens": ep.decoding.max_tokens,
    });
    if let Some(seed) = seed {
        body["seed"] = json!(seed);
    }
    body
}

/// Reads `choices[0].message.content` from a chat-completion document.
pub fn extract_content(body: &str) -> Result<String, String> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| format!("malformed response body: {e}"))?;
    v.get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| "malformed response body: missing choices[0].message.content".to_string())
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

mod millis_vec {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &[Duration], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(d.iter().map(|d| d.as_millis() as u64))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Duration>, D::Error> {
        Vec::<u64>::deserialize(d).map(|v| v.into_iter().map(Duration::from_millis).collect())
    }
}
