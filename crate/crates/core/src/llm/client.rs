use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            model: "gpt-3.5-turbo".into(),
            temperature: 0.2,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    /// Whitespace-token counts, used when no tokenizer is available.
    pub fn approximate(prompt: &str, response: &str) -> Self {
        Self {
            prompt_tokens: prompt.split_whitespace().count() as u64,
            completion_tokens: response.split_whitespace().count() as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Live,
    Replay,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub prompt: String,
    pub params: DecodingParams,
    pub response: String,
    pub usage: Usage,
    pub latency_s: f64,
    pub transport: TransportKind,
}

/// SHA-256 over the canonical JSON of `{"params", "prompt"}`.
pub fn replay_key(prompt: &str, params: &DecodingParams) -> String {
    let canonical = serde_json::json!({ "params": params, "prompt": prompt });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// One line of a recording file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub key: String,
    pub prompt: String,
    pub params: DecodingParams,
    pub response: String,
    pub usage: Usage,
}

impl Record {
    pub fn new(prompt: &str, params: &DecodingParams, response: &str, usage: Usage) -> Self {
        Self {
            key: replay_key(prompt, params),
            prompt: prompt.to_string(),
            params: params.clone(),
            response: response.to_string(),
            usage,
        }
    }
}

/// Recorded exchanges indexed by replay key. A key recorded twice keeps
/// its first response.
#[derive(Debug, Clone, Default)]
pub struct ReplayStore {
    records: HashMap<String, Record>,
}

impl ReplayStore {
    pub fn from_records(records: impl IntoIterator<Item = Record>) -> Result<Self, LlmError> {
        let mut map = HashMap::new();
        for r in records {
            let expected = replay_key(&r.prompt, &r.params);
            if expected != r.key {
                return Err(LlmError::Recording(format!(
                    "record key {} does not match its prompt and params",
                    r.key
                )));
            }
            map.entry(r.key.clone()).or_insert(r);
        }
        Ok(Self { records: map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let file = File::open(path.as_ref())
            .map_err(|e| LlmError::Recording(format!("{}: {e}", path.as_ref().display())))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LlmError::Recording(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| LlmError::Recording(format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Self::from_records(records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Record> {
        self.records.get(key)
    }
}

type ResponderFn = dyn Fn(&str) -> Option<String> + Send + Sync;

/// Canned responses for the mock transport: exact prompts first, then
/// substring rules in insertion order, then an optional fallback closure.
#[derive(Clone, Default)]
pub struct MockResponder {
    exact: HashMap<String, String>,
    contains: Vec<(String, String)>,
    fallback: Option<Arc<ResponderFn>>,
}

impl MockResponder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn exact(mut self, prompt: impl Into<String>, response: impl Into<String>) -> Self {
        self.exact.insert(prompt.into(), response.into());
        self
    }

    pub fn when_contains(mut self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        self.contains.push((needle.into(), response.into()));
        self
    }

    pub fn with_fallback(mut self, f: impl Fn(&str) -> Option<String> + Send + Sync + 'static) -> Self {
        self.fallback = Some(Arc::new(f));
        self
    }

    fn respond(&self, prompt: &str) -> Option<String> {
        if let Some(r) = self.exact.get(prompt) {
            return Some(r.clone());
        }
        if let Some((_, r)) = self.contains.iter().find(|(n, _)| prompt.contains(n.as_str())) {
            return Some(r.clone());
        }
        self.fallback.as_ref().and_then(|f| f(prompt))
    }
}

impl std::fmt::Debug for MockResponder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockResponder")
            .field("exact", &self.exact.len())
            .field("contains", &self.contains.len())
            .field("fallback", &self.fallback.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Service root; `/v1/chat/completions` is appended unless the URL
    /// already ends in `/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key,
            max_retries: 5,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }

    fn endpoint(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

enum Transport {
    Live { cfg: LiveConfig, agent: ureq::Agent },
    Replay(ReplayStore),
    Mock(MockResponder),
}

struct RateLimiter {
    rps: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    fn new(rps: f64) -> Self {
        Self {
            rps,
            state: Mutex::new((1.0, Instant::now())),
        }
    }

    /// Blocks until a token is available. Bucket capacity is one request.
    fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().expect("limiter poisoned");
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rps).min(1.0);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rps
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// Chat client over one of three transports. Safe to share across threads.
pub struct LlmClient {
    transport: Transport,
    params: DecodingParams,
    recorder: Option<Mutex<File>>,
    record_path: Option<PathBuf>,
    limiter: Option<RateLimiter>,
    network_calls: AtomicU64,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("transport", &self.transport_kind())
            .field("params", &self.params)
            .field("record_path", &self.record_path)
            .finish()
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl LlmClient {
    fn with_transport(transport: Transport, params: DecodingParams) -> Self {
        Self {
            transport,
            params,
            recorder: None,
            record_path: None,
            limiter: None,
            network_calls: AtomicU64::new(0),
        }
    }

    pub fn live(cfg: LiveConfig, params: DecodingParams) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(cfg.timeout))
            .build()
            .into();
        Self::with_transport(Transport::Live { cfg, agent }, params)
    }

    pub fn replay(store: ReplayStore, params: DecodingParams) -> Self {
        Self::with_transport(Transport::Replay(store), params)
    }

    pub fn replay_file(path: impl AsRef<Path>, params: DecodingParams) -> Result<Self, LlmError> {
        Ok(Self::replay(ReplayStore::load(path)?, params))
    }

    pub fn mock(responder: MockResponder, params: DecodingParams) -> Self {
        Self::with_transport(Transport::Mock(responder), params)
    }

    /// Appends every successful exchange to a JSONL recording.
    pub fn with_recorder(mut self, path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path.as_ref())
            .map_err(|e| LlmError::Recording(format!("{}: {e}", path.as_ref().display())))?;
        self.recorder = Some(Mutex::new(file));
        self.record_path = Some(path.as_ref().to_path_buf());
        Ok(self)
    }

    pub fn with_rate_limit(mut self, rps: f64) -> Self {
        self.limiter = (rps > 0.0 && rps.is_finite()).then(|| RateLimiter::new(rps));
        self
    }

    pub fn params(&self) -> &DecodingParams {
        &self.params
    }

    pub fn transport_kind(&self) -> TransportKind {
        match self.transport {
            Transport::Live { .. } => TransportKind::Live,
            Transport::Replay(_) => TransportKind::Replay,
            Transport::Mock(_) => TransportKind::Mock,
        }
    }

    /// HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn chat(&self, prompt: &str) -> Result<LlmExchange, LlmError> {
        self.chat_with(prompt, &self.params)
    }

    pub fn chat_with(&self, prompt: &str, params: &DecodingParams) -> Result<LlmExchange, LlmError> {
        let start = Instant::now();
        let (response, usage, latency_s) = match &self.transport {
            Transport::Replay(store) => {
                let key = replay_key(prompt, params);
                let rec = store.get(&key).ok_or(LlmError::ReplayMiss { key })?;
                (rec.response.clone(), rec.usage, 0.0)
            }
            Transport::Mock(responder) => {
                let response = responder.respond(prompt).ok_or_else(|| LlmError::Service {
                    status: None,
                    message: "mock responder has no answer for this prompt".into(),
                })?;
                let usage = Usage::approximate(prompt, &response);
                (response, usage, 0.0)
            }
            Transport::Live { cfg, agent } => {
                let (response, usage) = self.live_call(cfg, agent, prompt, params)?;
                (response, usage, start.elapsed().as_secs_f64())
            }
        };
        if let Some(rec) = &self.recorder {
            let line = serde_json::to_string(&Record::new(prompt, params, &response, usage)).expect("record json");
            let mut f = rec.lock().expect("recorder poisoned");
            writeln!(f, "{line}").map_err(|e| LlmError::Recording(e.to_string()))?;
            f.flush().map_err(|e| LlmError::Recording(e.to_string()))?;
        }
        Ok(LlmExchange {
            prompt: prompt.to_string(),
            params: params.clone(),
            response,
            usage,
            latency_s,
            transport: self.transport_kind(),
        })
    }

    fn live_call(
        &self,
        cfg: &LiveConfig,
        agent: &ureq::Agent,
        prompt: &str,
        params: &DecodingParams,
    ) -> Result<(String, Usage), LlmError> {
        let body = serde_json::json!({
            "model": params.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let url = cfg.endpoint();
        let mut attempt = 0u32;
        loop {
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let mut req = agent.post(&url);
            if let Some(key) = &cfg.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let failure = match req.send_json(&body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 200 {
                        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| LlmError::Service {
                            status: Some(status),
                            message: format!("malformed completion: {e}"),
                        })?;
                        let content = parsed
                            .choices
                            .into_iter()
                            .next()
                            .and_then(|c| c.message.content)
                            .ok_or_else(|| LlmError::Service {
                                status: Some(status),
                                message: "completion has no message content".into(),
                            })?;
                        let usage = parsed.usage.unwrap_or_else(|| Usage::approximate(prompt, &content));
                        return Ok((content, usage));
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    let retryable = status == 429 || (500..600).contains(&status);
                    let err = LlmError::Service {
                        status: Some(status),
                        message: text.chars().take(500).collect(),
                    };
                    if !retryable {
                        return Err(err);
                    }
                    err
                }
                Err(e) => LlmError::Service {
                    status: None,
                    message: e.to_string(),
                },
            };
            if attempt >= cfg.max_retries {
                return Err(failure);
            }
            let backoff = cfg.initial_backoff * 2u32.saturating_pow(attempt);
            log::warn!("chat request failed ({failure}); retrying in {backoff:?}");
            std::thread::sleep(backoff);
            attempt += 1;
        }
    }
}
