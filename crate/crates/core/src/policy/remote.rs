//! Client side of the remote policy protocol, plus a mock server.
//!
//! A request is one JSON object `{agent_id, context, n, temperature, seed?}`;
//! the reply is `{candidates: [{text, logprob}]}` with exactly `n` entries in
//! draw order. Over TCP each message is a single newline-terminated line.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PolicyError, SampledAction};
use crate::model::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub agent_id: String,
    pub context: String,
    pub n: usize,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteCandidate {
    pub text: String,
    /// Total sequence log-probability of `text`.
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub candidates: Vec<RemoteCandidate>,
}

/// Moves one serialized request to a server and returns the raw reply.
pub trait Transport: Send + Sync + fmt::Debug {
    /// Failures must be reported as [`PolicyError::Transport`].
    fn round_trip(&self, request: &str) -> Result<String, PolicyError>;
}

/// Newline-delimited JSON over a fresh TCP connection per request.
#[derive(Debug, Clone)]
pub struct TcpTransport {
    pub address: String,
    pub timeout: Duration,
}

impl TcpTransport {
    pub fn new(address: impl Into<String>, timeout: Duration) -> Self {
        Self { address: address.into(), timeout }
    }
}

impl Transport for TcpTransport {
    fn round_trip(&self, request: &str) -> Result<String, PolicyError> {
        let transport = |e: std::io::Error| PolicyError::Transport(format!("{}: {e}", self.address));
        let addr = self
            .address
            .to_socket_addrs()
            .map_err(transport)?
            .next()
            .ok_or_else(|| PolicyError::Transport(format!("{}: no address", self.address)))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(transport)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(transport)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(transport)?;
        stream.write_all(request.as_bytes()).map_err(transport)?;
        stream.write_all(b"\n").map_err(transport)?;
        stream.flush().map_err(transport)?;
        let mut line = String::new();
        BufReader::new(stream).read_line(&mut line).map_err(transport)?;
        if line.is_empty() {
            return Err(PolicyError::Transport(format!("{}: connection closed without reply", self.address)));
        }
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    }
}

/// Bounded retries with exponential backoff, for transport errors only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, initial_backoff: Duration::from_millis(50) }
    }
}

#[derive(Debug, Clone)]
pub struct RemotePolicy {
    pub transport: Arc<dyn Transport>,
    pub retry: RetryPolicy,
}

impl RemotePolicy {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self { transport, retry: RetryPolicy::default() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn sample(
        &self,
        agent_id: &str,
        obs: &Observation,
        n: usize,
        temperature: f64,
        seed: Option<u64>,
    ) -> Result<Vec<SampledAction>, PolicyError> {
        let request = RemoteRequest { agent_id: agent_id.to_string(), context: obs.context(), n, temperature, seed };
        let payload = serde_json::to_string(&request).expect("request serializes");
        let mut attempt = 0;
        let raw = loop {
            match self.transport.round_trip(&payload) {
                Ok(raw) => break raw,
                Err(e) if e.is_retryable() && attempt + 1 < self.retry.max_attempts => {
                    std::thread::sleep(self.retry.initial_backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        decode_response(&raw, n)
    }
}

/// Validates a raw reply against the request's candidate count.
pub fn decode_response(raw: &str, n: usize) -> Result<Vec<SampledAction>, PolicyError> {
    let protocol = |message: String| PolicyError::Protocol { message, raw: raw.to_string() };
    let response: RemoteResponse =
        serde_json::from_str(raw).map_err(|e| protocol(format!("malformed response: {e}")))?;
    if response.candidates.len() != n {
        return Err(protocol("candidate count mismatch".to_string()));
    }
    response
        .candidates
        .into_iter()
        .map(|c| {
            if c.logprob.is_finite() && c.logprob <= 0.0 {
                Ok(SampledAction { text: c.text, logprob: c.logprob })
            } else {
                Err(protocol(format!("invalid logprob {}", c.logprob)))
            }
        })
        .collect()
}

/// Behaviour of the bundled mock server.
#[derive(Debug, Clone, PartialEq)]
pub enum MockBehavior {
    /// Returns `n` copies of one candidate.
    Fixed { text: String, logprob: f64 },
    /// Calls a random tool from the context's tool list until some turn has
    /// happened, then answers with the last turn's result line.
    Heuristic,
}

/// In-process stand-in for a model server; usable directly as a
/// [`Transport`] or served over TCP with [`MockPolicyServer::serve_tcp`].
#[derive(Debug)]
pub struct MockPolicyServer {
    pub behavior: MockBehavior,
    /// Return this many candidates fewer than requested.
    pub drop_candidates: usize,
    /// Fail this many requests with a transport error before answering.
    pub transient_failures: AtomicUsize,
    pub requests: AtomicUsize,
}

impl MockPolicyServer {
    pub fn new(behavior: MockBehavior) -> Self {
        Self { behavior, drop_candidates: 0, transient_failures: AtomicUsize::new(0), requests: AtomicUsize::new(0) }
    }

    /// Computes the reply for one request line.
    pub fn respond(&self, request: &str) -> String {
        let req: RemoteRequest = match serde_json::from_str(request) {
            Ok(r) => r,
            Err(e) => return serde_json::json!({ "error": e.to_string() }).to_string(),
        };
        let count = req.n.saturating_sub(self.drop_candidates);
        let candidates: Vec<RemoteCandidate> = match &self.behavior {
            MockBehavior::Fixed { text, logprob } => {
                vec![RemoteCandidate { text: text.clone(), logprob: *logprob }; count]
            }
            MockBehavior::Heuristic => {
                let options = heuristic_options(&req.context);
                let logprob = -(options.len() as f64).ln();
                let mut rng = ChaCha8Rng::seed_from_u64(req.seed.unwrap_or(0));
                (0..count)
                    .map(|_| RemoteCandidate { text: options[rng.gen_range(0..options.len())].clone(), logprob })
                    .collect()
            }
        };
        serde_json::to_string(&RemoteResponse { candidates }).expect("response serializes")
    }

    /// Serves newline-delimited requests until the listener fails.
    pub fn serve_tcp(self: Arc<Self>, listener: TcpListener) -> JoinHandle<()> {
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let server = Arc::clone(&self);
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(match stream.try_clone() {
                        Ok(s) => s,
                        Err(_) => return,
                    });
                    let mut writer = stream;
                    let mut line = String::new();
                    while reader.read_line(&mut line).map(|n| n > 0).unwrap_or(false) {
                        server.requests.fetch_add(1, Ordering::SeqCst);
                        if server.take_failure() {
                            return; // drop the connection
                        }
                        let reply = server.respond(line.trim_end());
                        if writer.write_all(reply.as_bytes()).and_then(|_| writer.write_all(b"\n")).is_err() {
                            return;
                        }
                        line.clear();
                    }
                });
            }
        })
    }

    fn take_failure(&self) -> bool {
        self.transient_failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok()
    }
}

impl Transport for MockPolicyServer {
    fn round_trip(&self, request: &str) -> Result<String, PolicyError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        if self.take_failure() {
            return Err(PolicyError::Transport("mock: injected failure".into()));
        }
        Ok(self.respond(request))
    }
}

fn heuristic_options(context: &str) -> Vec<String> {
    if let Some(result) = last_turn_result(context) {
        return vec![format!("<think>report the result</think>{result}"), result];
    }
    let tools: Vec<String> = between(context, "<tools>", "</tools>")
        .and_then(|t| serde_json::from_str(t).ok())
        .unwrap_or_default();
    if tools.is_empty() {
        return vec!["<think>nothing to call</think>unknown".to_string()];
    }
    tools
        .iter()
        .map(|t| format!("<think>delegate to {t}</think><tool_call>{{\"name\":\"{t}\"}}</tool_call>"))
        .collect()
}

fn between<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)? + start;
    Some(&text[start..end])
}

fn last_turn_result(context: &str) -> Option<String> {
    let start = context.rfind("<turn")?;
    let body = &context[start..];
    let body = &body[body.find('>')? + 1..body.find("</turn>")?];
    let line = body.lines().last()?.trim();
    (!line.is_empty()).then(|| line.to_string())
}
