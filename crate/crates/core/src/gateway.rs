//! Chat-completion gateway shared by every model role.
//!
//! A [`Gateway`] routes each [`ChatRequest`] to the backend configured for
//! its role, retries transport failures, enforces a call budget, and keeps
//! an append-only audit log of every `complete` invocation.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tracing::{debug, warn};

use crate::canonical;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Controller,
    Verifier,
    Taskgen,
    Filegen,
    Filter,
}

impl RoleTag {
    pub const ALL: [RoleTag; 5] = [
        RoleTag::Controller,
        RoleTag::Verifier,
        RoleTag::Taskgen,
        RoleTag::Filegen,
        RoleTag::Filter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Controller => "controller",
            RoleTag::Verifier => "verifier",
            RoleTag::Taskgen => "taskgen",
            RoleTag::Filegen => "filegen",
            RoleTag::Filter => "filter",
        }
    }

    pub fn parse(s: &str) -> Option<RoleTag> {
        RoleTag::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Message {
        Message {
            speaker: Speaker::System,
            text: text.into(),
        }
    }

    pub fn user(text: impl Into<String>) -> Message {
        Message {
            speaker: Speaker::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Message {
        Message {
            speaker: Speaker::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: usize,
}

impl Sampling {
    /// Deterministic single-sample decoding.
    pub fn greedy(max_tokens: u32) -> Sampling {
        Sampling {
            temperature: 0.0,
            max_tokens,
            n_samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role_tag: RoleTag,
    pub messages: Vec<Message>,
    pub sampling: Sampling,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(role_tag: RoleTag, messages: Vec<Message>, sampling: Sampling) -> ChatRequest {
        ChatRequest {
            role_tag,
            messages,
            sampling,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> ChatRequest {
        self.seed = Some(seed);
        self
    }

    /// Digest over role, messages, sampling and seed.
    pub fn digest(&self) -> String {
        canonical::digest(self).expect("chat requests always encode")
    }

    /// Text of the last user message, if any.
    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.speaker == Speaker::User)
            .map(|m| m.text.as_str())
    }

    pub fn system_text(&self) -> &str {
        self.messages
            .first()
            .filter(|m| m.speaker == Speaker::System)
            .map(|m| m.text.as_str())
            .unwrap_or("")
    }

    pub fn check(&self) -> Result<(), GatewayError> {
        if self.messages.first().map(|m| m.speaker) != Some(Speaker::System) {
            return Err(GatewayError::InvalidRequest(
                "first message must come from the system".into(),
            ));
        }
        let s = &self.sampling;
        if s.n_samples == 0 {
            return Err(GatewayError::InvalidRequest("n_samples must be positive".into()));
        }
        if s.n_samples > 1 && self.role_tag != RoleTag::Controller {
            return Err(GatewayError::InvalidRequest(format!(
                "only the controller may request {} samples",
                s.n_samples
            )));
        }
        if s.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !(s.temperature >= 0.0 && s.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub texts: Vec<String>,
    pub usage: Usage,
    pub backend_id: String,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no backend configured for role {0:?}")]
    NoBackend(RoleTag),
}

/// A chat-completion provider.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Whether one call may return several samples.
    fn supports_multi_sample(&self) -> bool {
        true
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles on each further attempt.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub role: RoleTag,
    pub request_digest: String,
    /// Digest of the last user message text.
    pub user_digest: Option<String>,
    pub attempts: u32,
    pub ok: bool,
}

struct InFlight {
    limit: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut cur = self.current.lock().unwrap();
        while *cur >= self.limit {
            cur = self.freed.wait(cur).unwrap();
        }
        *cur += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Routes requests to per-role backends.
pub struct Gateway {
    backends: BTreeMap<RoleTag, Arc<dyn ChatBackend>>,
    retry: RetryPolicy,
    max_calls: Option<u64>,
    calls: Mutex<u64>,
    audit: Mutex<Vec<AuditEntry>>,
    in_flight: InFlight,
}

impl Gateway {
    pub fn new() -> Gateway {
        Gateway {
            backends: BTreeMap::new(),
            retry: RetryPolicy::default(),
            max_calls: None,
            calls: Mutex::new(0),
            audit: Mutex::new(Vec::new()),
            in_flight: InFlight {
                limit: 8,
                current: Mutex::new(0),
                freed: Condvar::new(),
            },
        }
    }

    /// Routes every role to the same backend.
    pub fn uniform(backend: Arc<dyn ChatBackend>) -> Gateway {
        let mut g = Gateway::new();
        for role in RoleTag::ALL {
            g = g.with_backend(role, backend.clone());
        }
        g
    }

    pub fn with_backend(mut self, role: RoleTag, backend: Arc<dyn ChatBackend>) -> Gateway {
        self.backends.insert(role, backend);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Gateway {
        self.retry = retry;
        self
    }

    pub fn with_call_budget(mut self, max_calls: u64) -> Gateway {
        self.max_calls = Some(max_calls);
        self
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Gateway {
        self.in_flight.limit = limit.max(1);
        self
    }

    pub fn has_backend(&self, role: RoleTag) -> bool {
        self.backends.contains_key(&role)
    }

    /// Completes a request under the gateway's retry policy.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        self.complete_with_retry(request, self.retry.attempts)
    }

    /// Completes a request with at most `attempts` transport attempts.
    pub fn complete_with_retry(
        &self,
        request: &ChatRequest,
        attempts: u32,
    ) -> Result<ChatReply, GatewayError> {
        if attempts == 0 {
            return Err(GatewayError::InvalidRequest("attempts must be at least 1".into()));
        }
        request.check()?;
        let backend = self
            .backends
            .get(&request.role_tag)
            .ok_or(GatewayError::NoBackend(request.role_tag))?
            .clone();
        {
            let mut calls = self.calls.lock().unwrap();
            if let Some(max) = self.max_calls {
                if *calls >= max {
                    return Err(GatewayError::BudgetExceeded(format!(
                        "call budget of {max} exhausted"
                    )));
                }
            }
            *calls += 1;
        }

        let _slot = self.in_flight.acquire();
        let mut used = 0;
        let mut result = Err(GatewayError::BackendUnavailable("no attempt made".into()));
        for attempt in 0..attempts {
            used = attempt + 1;
            if attempt > 0 {
                let delay = self.retry.base_delay * 2u32.saturating_pow(attempt - 1);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            result = dispatch(backend.as_ref(), request);
            match &result {
                Err(GatewayError::BackendUnavailable(msg)) => {
                    warn!(role = request.role_tag.as_str(), attempt = used, "{msg}");
                }
                _ => break,
            }
        }
        self.audit.lock().unwrap().push(AuditEntry {
            role: request.role_tag,
            request_digest: request.digest(),
            user_digest: request
                .last_user_text()
                .map(|t| canonical::sha256_hex(t.as_bytes())),
            attempts: used,
            ok: result.is_ok(),
        });
        result
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.audit.lock().unwrap().clone()
    }

    pub fn calls_by_role(&self) -> BTreeMap<RoleTag, usize> {
        let mut m = BTreeMap::new();
        for e in self.audit.lock().unwrap().iter() {
            *m.entry(e.role).or_insert(0) += 1;
        }
        m
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Gateway::new()
    }
}

fn dispatch(backend: &dyn ChatBackend, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
    let n = request.sampling.n_samples;
    let reply = if n > 1 && !backend.supports_multi_sample() {
        let mut texts = Vec::with_capacity(n);
        let mut usage = Usage::default();
        for i in 0..n {
            let mut single = request.clone();
            single.sampling.n_samples = 1;
            single.seed = Some(derive_seed(request.seed.unwrap_or(0), i as u64));
            let r = backend.complete(&single)?;
            usage.prompt_tokens += r.usage.prompt_tokens;
            usage.completion_tokens += r.usage.completion_tokens;
            texts.extend(r.texts);
        }
        ChatReply {
            texts,
            usage,
            backend_id: backend.id().to_string(),
        }
    } else {
        backend.complete(request)?
    };
    if reply.texts.len() != n {
        return Err(GatewayError::BackendUnavailable(format!(
            "backend {} returned {} texts for {} samples",
            reply.backend_id,
            reply.texts.len(),
            n
        )));
    }
    debug!(role = request.role_tag.as_str(), n, "completed");
    Ok(reply)
}

/// Mixes a base seed with a sample index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let digest = canonical::sha256_hex(format!("{base}:{index}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn usage_for(request: &ChatRequest, texts: &[String]) -> Usage {
    Usage {
        prompt_tokens: request.messages.iter().map(|m| approx_tokens(&m.text)).sum(),
        completion_tokens: texts.iter().map(|t| approx_tokens(t)).sum(),
    }
}

/// Scripted replies keyed by (role, request digest), with an ordered
/// per-role fallback queue for unkeyed requests.
pub struct MockBackend {
    id: String,
    keyed: HashMap<(RoleTag, String), Vec<String>>,
    queues: Mutex<HashMap<RoleTag, VecDeque<String>>>,
    fail_next: Mutex<u32>,
    down: bool,
}

#[derive(Debug, Deserialize)]
struct FixtureLine {
    role: RoleTag,
    #[serde(default)]
    digest: Option<String>,
    texts: Vec<String>,
}

impl MockBackend {
    pub fn new() -> MockBackend {
        MockBackend {
            id: "mock".to_string(),
            keyed: HashMap::new(),
            queues: Mutex::new(HashMap::new()),
            fail_next: Mutex::new(0),
            down: false,
        }
    }

    /// A backend whose every call fails with a transport error.
    pub fn unavailable() -> MockBackend {
        MockBackend {
            down: true,
            ..MockBackend::new()
        }
    }

    /// Loads `replies.jsonl` from a fixture directory. Lines carrying a
    /// `digest` are keyed replies; the rest feed the role's queue in order.
    pub fn from_dir(dir: &Path) -> Result<MockBackend, crate::CoreError> {
        let text = std::fs::read_to_string(dir.join("replies.jsonl"))?;
        let mut mock = MockBackend::new();
        for line in canonical::from_ndjson::<FixtureLine>(&text)? {
            match line.digest {
                Some(d) => mock = mock.keyed(line.role, d, line.texts),
                None => {
                    for t in line.texts {
                        mock = mock.queued(line.role, t);
                    }
                }
            }
        }
        Ok(mock)
    }

    pub fn keyed(mut self, role: RoleTag, digest: impl Into<String>, texts: Vec<String>) -> Self {
        self.keyed.insert((role, digest.into()), texts);
        self
    }

    pub fn queued(self, role: RoleTag, text: impl Into<String>) -> Self {
        self.queues
            .lock()
            .unwrap()
            .entry(role)
            .or_default()
            .push_back(text.into());
        self
    }

    /// Makes the next `k` calls fail with a transport error.
    pub fn failing_first(self, k: u32) -> Self {
        *self.fail_next.lock().unwrap() = k;
        self
    }

    pub fn remaining(&self, role: RoleTag) -> usize {
        self.queues
            .lock()
            .unwrap()
            .get(&role)
            .map_or(0, VecDeque::len)
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend::new()
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        if self.down {
            return Err(GatewayError::BackendUnavailable("mock backend is down".into()));
        }
        {
            let mut fail = self.fail_next.lock().unwrap();
            if *fail > 0 {
                *fail -= 1;
                return Err(GatewayError::BackendUnavailable("scripted transport failure".into()));
            }
        }
        let n = request.sampling.n_samples;
        let texts = if let Some(t) = self.keyed.get(&(request.role_tag, request.digest())) {
            t.iter().cycle().take(n).cloned().collect::<Vec<_>>()
        } else {
            let mut queues = self.queues.lock().unwrap();
            let q = queues.entry(request.role_tag).or_default();
            if q.len() < n {
                return Err(GatewayError::BackendUnavailable(format!(
                    "mock queue for {} exhausted",
                    request.role_tag.as_str()
                )));
            }
            q.drain(..n).collect()
        };
        Ok(ChatReply {
            usage: usage_for(request, &texts),
            texts,
            backend_id: self.id.clone(),
        })
    }
}

type ReplyFn = dyn Fn(&ChatRequest) -> Result<Vec<String>, GatewayError> + Send + Sync;

/// Backend computing replies with a closure; handy for scripted tests.
pub struct FnBackend {
    id: String,
    f: Box<ReplyFn>,
}

impl FnBackend {
    pub fn new(
        id: impl Into<String>,
        f: impl Fn(&ChatRequest) -> Result<Vec<String>, GatewayError> + Send + Sync + 'static,
    ) -> FnBackend {
        FnBackend {
            id: id.into(),
            f: Box::new(f),
        }
    }
}

impl ChatBackend for FnBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let texts = (self.f)(request)?;
        Ok(ChatReply {
            usage: usage_for(request, &texts),
            texts,
            backend_id: self.id.clone(),
        })
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiBackend {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    multi_sample: bool,
}

#[derive(Debug, Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Debug, Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl OpenAiBackend {
    /// `endpoint` is the API base (e.g. `http://host/v1`) or the full
    /// completions URL. The bearer token is read from `api_key_env`.
    pub fn new(endpoint: &str, model: &str, api_key_env: Option<&str>, timeout: Duration) -> Self {
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        OpenAiBackend {
            id: format!("openai:{model}"),
            url,
            model: model.to_string(),
            api_key: api_key_env.and_then(|k| std::env::var(k).ok()),
            agent,
            multi_sample: true,
        }
    }

    /// For servers that ignore `n`; samples are then drawn one per call.
    pub fn single_sample_only(mut self) -> Self {
        self.multi_sample = false;
        self
    }

    pub fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.speaker {
                    Speaker::System => "system",
                    Speaker::User => "user",
                    Speaker::Assistant => "assistant",
                };
                json!({"role": role, "content": m.text})
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.sampling.temperature,
            "n": request.sampling.n_samples,
            "max_tokens": request.sampling.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl ChatBackend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports_multi_sample(&self) -> bool {
        self.multi_sample
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(request))
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(GatewayError::BackendUnavailable(format!(
                "HTTP {status}: {}",
                body.chars().take(200).collect::<String>()
            )));
        }
        let wire: WireReply = resp
            .body_mut()
            .read_json()
            .map_err(|e| GatewayError::BackendUnavailable(format!("bad reply body: {e}")))?;
        let texts: Vec<String> = wire
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect();
        let usage = wire
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(ChatReply {
            texts,
            usage,
            backend_id: self.id.clone(),
        })
    }
}
