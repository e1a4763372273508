//! In-process chat-completions server driven by a deterministic script.
//!
//! The stub speaks the same wire protocol as a real endpoint and listens on
//! an ephemeral loopback port, so the client code path is identical. A
//! script's reply is a pure function of the system text, the user text,
//! the per-(system, user) call count, the request `seed` field and the
//! stub's own seed.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::task::JoinHandle;

use super::{Limits, ModelEndpoint};
use crate::statements::parse_instruction_text;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubReply {
    Text(String),
    Status(u16),
    /// Never answers within any sane client timeout.
    Timeout,
    /// HTTP 200 with a body that is not a chat-completion document.
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyedRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_contains: Option<String>,
    pub script: StubScript,
}

impl KeyedRule {
    fn matches(&self, system: &str, user: &str) -> bool {
        self.system_contains.as_deref().map_or(true, |s| system.contains(s))
            && self.user_contains.as_deref().map_or(true, |s| user.contains(s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum StubScript {
    Constant { reply: StubReply },
    /// `replies[call % len]`, e.g. two 503s then a text to script
    /// "fail twice then reply".
    Cycle { replies: Vec<StubReply> },
    /// `[d]` with `d` drawn uniformly from `low..=high`.
    RandomLikert {
        #[serde(default)]
        low: u8,
        #[serde(default = "default_high")]
        high: u8,
    },
    /// Replies with the first bracketed digit found in the user text.
    EchoLegend,
    /// Answers `[level]` for any item whose sentence appears in a
    /// "You {modifier} agree that {statement}." line of the system text.
    Instructed { fallback: Box<StubScript> },
    /// First matching rule wins.
    Keyed {
        rules: Vec<KeyedRule>,
        default: Box<StubScript>,
    },
    Delayed { delay_ms: u64, inner: Box<StubScript> },
}

fn default_high() -> u8 {
    5
}

impl StubScript {
    pub fn constant(text: impl Into<String>) -> Self {
        StubScript::Constant {
            reply: StubReply::Text(text.into()),
        }
    }

    /// Attention-check-passing respondent: 0 on "good at math", 5 on
    /// "better to do good", `rest` everywhere else.
    pub fn attentive(rest: StubScript) -> Self {
        StubScript::Keyed {
            rules: vec![
                KeyedRule {
                    system_contains: None,
                    user_contains: Some("good at math".into()),
                    script: StubScript::constant("[0]"),
                },
                KeyedRule {
                    system_contains: None,
                    user_contains: Some("better to do good than to do bad".into()),
                    script: StubScript::constant("[5]"),
                },
            ],
            default: Box::new(rest),
        }
    }

    pub fn respond(&self, req: &StubRequest<'_>) -> (StubReply, Duration) {
        match self {
            StubScript::Constant { reply } => (reply.clone(), Duration::ZERO),
            StubScript::Cycle { replies } => {
                if replies.is_empty() {
                    return (StubReply::Status(500), Duration::ZERO);
                }
                let i = (req.call % replies.len() as u64) as usize;
                (replies[i].clone(), Duration::ZERO)
            }
            StubScript::RandomLikert { low, high } => {
                let (lo, hi) = (*low.min(high), *high.max(low));
                let mut rng = ChaCha8Rng::from_seed(req.digest());
                let d: u8 = rng.gen_range(lo..=hi);
                (StubReply::Text(format!("[{d}]")), Duration::ZERO)
            }
            StubScript::EchoLegend => {
                let b = req.user.as_bytes();
                let found = b
                    .windows(3)
                    .find(|w| w[0] == b'[' && w[1].is_ascii_digit() && w[2] == b']')
                    .map(|w| format!("[{}]", w[1] as char));
                (
                    StubReply::Text(found.unwrap_or_else(|| "no legend".into())),
                    Duration::ZERO,
                )
            }
            StubScript::Instructed { fallback } => {
                let user = req.user.to_lowercase();
                for sentence in instruction_sentences(req.system) {
                    if let Some((level, statement)) = parse_instruction_text(sentence) {
                        if !statement.is_empty() && user.contains(&statement) {
                            return (StubReply::Text(format!("[{level}]")), Duration::ZERO);
                        }
                    }
                }
                fallback.respond(req)
            }
            StubScript::Keyed { rules, default } => rules
                .iter()
                .find(|r| r.matches(req.system, req.user))
                .map_or_else(|| default.respond(req), |r| r.script.respond(req)),
            StubScript::Delayed { delay_ms, inner } => {
                let (reply, d) = inner.respond(req);
                (reply, d + Duration::from_millis(*delay_ms))
            }
        }
    }
}

/// Splits "You strongly agree that a. You slightly agree that b." into
/// its instruction sentences.
fn instruction_sentences(system: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for line in system.lines() {
        let mut rest = line.trim();
        while !rest.is_empty() {
            match rest.find(". You ") {
                Some(i) => {
                    out.push(&rest[..=i]);
                    rest = &rest[i + 2..];
                }
                None => {
                    out.push(rest);
                    break;
                }
            }
        }
    }
    out
}

/// What a script sees of a request.
#[derive(Debug, Clone, Copy)]
pub struct StubRequest<'a> {
    pub system: &'a str,
    pub user: &'a str,
    /// Zero-based count of earlier requests with the same (system, user).
    pub call: u64,
    pub request_seed: Option<u64>,
    pub stub_seed: u64,
}

impl StubRequest<'_> {
    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.stub_seed.to_le_bytes());
        match self.request_seed {
            Some(s) => {
                h.update([1u8]);
                h.update(s.to_le_bytes());
            }
            None => {
                h.update([0u8]);
                h.update(self.call.to_le_bytes());
            }
        }
        h.update((self.system.len() as u64).to_le_bytes());
        h.update(self.system.as_bytes());
        h.update(self.user.as_bytes());
        h.finalize().into()
    }
}

/// Request counters, readable while the stub runs.
#[derive(Debug, Default)]
pub struct StubStats {
    requests: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl StubStats {
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

struct InFlight<'a>(&'a StubStats);

impl<'a> InFlight<'a> {
    fn enter(stats: &'a StubStats) -> Self {
        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(stats)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

struct StubState {
    script: StubScript,
    seed: u64,
    calls: Mutex<HashMap<(String, String), u64>>,
    stats: Arc<StubStats>,
}

/// A running stub. The server stops when this is dropped.
pub struct StubServer {
    addr: SocketAddr,
    stats: Arc<StubStats>,
    task: JoinHandle<()>,
}

impl StubServer {
    pub async fn start(script: StubScript, seed: u64) -> std::io::Result<Self> {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", 0)).await?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(StubStats::default());
        let state = Arc::new(StubState {
            script,
            seed,
            calls: Mutex::new(HashMap::new()),
            stats: stats.clone(),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(handle))
            .with_state(state);
        let task = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!("stub server stopped: {e}");
            }
        });
        tracing::info!("stub endpoint listening on http://{addr}");
        Ok(StubServer { addr, stats, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> &StubStats {
        &self.stats
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Starts a stub and returns an endpoint pointing at it. Keep the server
/// alive for as long as the endpoint is used.
pub async fn make_stub_endpoint(
    name: impl Into<String>,
    script: StubScript,
    seed: u64,
) -> std::io::Result<(ModelEndpoint, StubServer)> {
    let server = StubServer::start(script, seed).await?;
    let name = name.into();
    let mut ep = ModelEndpoint::new(name.clone(), server.base_url(), format!("stub/{name}"));
    ep.limits = Limits {
        backoff: Vec::new(),
        ..Limits::default()
    };
    Ok((ep, server))
}

fn message_text(body: &Value, role: &str) -> Option<String> {
    body.get("messages")?
        .as_array()?
        .iter()
        .rev()
        .find(|m| m.get("role").and_then(Value::as_str) == Some(role))
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

async fn handle(State(state): State<Arc<StubState>>, Json(body): Json<Value>) -> Response {
    state.stats.requests.fetch_add(1, Ordering::SeqCst);
    let _guard = InFlight::enter(&state.stats);

    let Some(user) = message_text(&body, "user") else {
        return (StatusCode::BAD_REQUEST, "missing user message").into_response();
    };
    let system = message_text(&body, "system").unwrap_or_default();
    let request_seed = body.get("seed").and_then(Value::as_u64);
    let call = {
        let mut calls = state.calls.lock().expect("stub lock");
        let n = calls.entry((system.clone(), user.clone())).or_insert(0);
        let c = *n;
        *n += 1;
        c
    };
    let req = StubRequest {
        system: &system,
        user: &user,
        call,
        request_seed,
        stub_seed: state.seed,
    };
    let (reply, delay) = state.script.respond(&req);
    if !delay.is_zero() {
        tokio::time::sleep(delay).await;
    }
    let model = body.get("model").cloned().unwrap_or(Value::Null);
    match reply {
        StubReply::Text(content) => Json(json!({
            "id": format!("stub-{call}"),
            "object": "chat.completion",
            "model": model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": content},
                "finish_reason": "stop"
            }]
        }))
        .into_response(),
        StubReply::Status(code) => {
            let code = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (code, "scripted failure").into_response()
        }
        StubReply::Timeout => {
            tokio::time::sleep(Duration::from_secs(3600)).await;
            StatusCode::GATEWAY_TIMEOUT.into_response()
        }
        StubReply::Malformed => (StatusCode::OK, "this is not json").into_response(),
    }
}
