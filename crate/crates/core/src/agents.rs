//! Agent abstraction: deterministic mock rules, transcript replay and
//! OpenAI-compatible chat endpoints, plus parsing of the fenced YAML answer
//! format shared by all of them.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::debate::DebateMessage;
use crate::tabular::TabularInstance;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AgentError {
    #[error("no recorded response for {0}")]
    ReplayMiss(ReplayKey),
    #[error("duplicate transcript entry for {0}")]
    DuplicateEntry(ReplayKey),
    #[error("http error: {0}")]
    Http(String),
    #[error("could not parse a `class` answer from response: {raw:?}")]
    ParseFailure { raw: String },
    #[error("mock rule error: {0}")]
    Mock(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    /// The "Agent i" number used in debate prompts. Assigned from the
    /// agent's position when a system is assembled.
    #[serde(default)]
    pub display_index: usize,
    pub backend: Backend,
    #[serde(default)]
    pub decoding: Decoding,
}

impl AgentSpec {
    pub fn mock(id: &str, rule: MockRule) -> Self {
        Self {
            id: id.to_string(),
            display_index: 0,
            backend: Backend::Mock { rule },
            decoding: Decoding::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Mock {
        rule: MockRule,
    },
    /// Reads recorded responses from a transcripts directory.
    Replay {
        path: PathBuf,
    },
    Http(HttpEndpoint),
}

impl Backend {
    pub fn kind(&self) -> &'static str {
        match self {
            Backend::Mock { .. } => "mock",
            Backend::Replay { .. } => "replay",
            Backend::Http(_) => "http",
        }
    }

    /// Model identity used in cache keys. Mocks are identified by their
    /// full rule so that two different rules never share a key.
    pub fn model_identity(&self) -> String {
        match self {
            Backend::Mock { rule } => serde_json::to_string(rule).unwrap_or_default(),
            Backend::Replay { path } => path.display().to_string(),
            Backend::Http(h) => format!("{}@{}", h.model, h.base_url),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Positive when the value is at or above the cutoff.
    #[default]
    Above,
    /// Positive when the value is strictly below the cutoff.
    Below,
}

/// Rule-based stand-in for a language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockRule {
    Constant {
        value: bool,
    },
    Threshold {
        column: String,
        cutoff: f64,
        #[serde(default)]
        direction: Direction,
    },
    GroupBiased {
        rules: BTreeMap<String, MockRule>,
    },
    /// Adopts the modal decision among visible messages; uses `fallback`
    /// when nothing is visible or the visible decisions tie.
    Conformist {
        fallback: Box<MockRule>,
    },
    /// Evaluates `rule` as if at round 0 with nothing visible, so its
    /// answer never changes during a debate.
    Stubborn {
        rule: Box<MockRule>,
    },
    /// Flips `base` with probability `flip_prob`, deterministically in
    /// (seed, instance id, round).
    Stochastic {
        base: Box<MockRule>,
        flip_prob: f64,
        seed: u64,
    },
}

impl MockRule {
    pub fn name(&self) -> &'static str {
        match self {
            MockRule::Constant { .. } => "constant",
            MockRule::Threshold { .. } => "threshold",
            MockRule::GroupBiased { .. } => "group_biased",
            MockRule::Conformist { .. } => "conformist",
            MockRule::Stubborn { .. } => "stubborn",
            MockRule::Stochastic { .. } => "stochastic",
        }
    }

    pub fn decide(&self, ctx: &InvokeContext<'_>) -> Result<bool, AgentError> {
        match self {
            MockRule::Constant { value } => Ok(*value),
            MockRule::Threshold {
                column,
                cutoff,
                direction,
            } => {
                let value = ctx
                    .instance
                    .features
                    .get(column)
                    .and_then(|v| v.as_f64())
                    .ok_or_else(|| {
                        AgentError::Mock(format!("column `{column}` missing or not numeric"))
                    })?;
                Ok(match direction {
                    Direction::Above => value >= *cutoff,
                    Direction::Below => value < *cutoff,
                })
            }
            MockRule::GroupBiased { rules } => rules
                .get(&ctx.instance.group)
                .ok_or_else(|| {
                    AgentError::Mock(format!("no rule for group `{}`", ctx.instance.group))
                })?
                .decide(ctx),
            MockRule::Conformist { fallback } => {
                let yes = ctx.visible.iter().filter(|m| m.response.decision).count();
                let no = ctx.visible.len() - yes;
                if yes == no {
                    fallback.decide(ctx)
                } else {
                    Ok(yes > no)
                }
            }
            MockRule::Stubborn { rule } => {
                let fixed = InvokeContext {
                    round: 0,
                    visible: &[],
                    ..*ctx
                };
                rule.decide(&fixed)
            }
            MockRule::Stochastic {
                base,
                flip_prob,
                seed,
            } => {
                let decision = base.decide(ctx)?;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(*seed, ctx.instance.id, ctx.round));
                let flip = rng.gen::<f64>() < *flip_prob;
                Ok(decision ^ flip)
            }
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix_seed(seed: u64, instance_id: u64, round: u32) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ instance_id) ^ u64::from(round))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEndpoint {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Base delay of the exponential backoff.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    5
}
fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub raw: String,
    pub decision: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default)]
    pub parse_retries: u32,
}

impl AgentResponse {
    /// Builds a response by parsing `raw`.
    pub fn from_raw(raw: String, parse_retries: u32) -> Result<Self, AgentError> {
        let parsed = parse_response(&raw)?;
        Ok(Self {
            raw,
            decision: parsed.decision,
            reason: parsed.reason,
            parse_retries,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub decision: bool,
    pub reason: Option<String>,
}

struct FencedBlock<'a> {
    info: &'a str,
    lines: Vec<&'a str>,
}

fn fenced_blocks(text: &str) -> Vec<FencedBlock<'_>> {
    let mut blocks = Vec::new();
    let mut current: Option<FencedBlock<'_>> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        match current.as_mut() {
            None => {
                if let Some(info) = trimmed.strip_prefix("```") {
                    current = Some(FencedBlock {
                        info: info.trim(),
                        lines: Vec::new(),
                    });
                }
            }
            Some(block) => {
                if trimmed.starts_with("```") {
                    blocks.extend(current.take());
                } else {
                    block.lines.push(line);
                }
            }
        }
    }
    // an unterminated block runs to the end of the text
    blocks.extend(current);
    blocks
}

fn yaml_field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let (k, v) = line.split_once(':')?;
    k.trim().eq_ignore_ascii_case(key).then(|| v.trim())
}

fn strip_quotes(s: &str) -> &str {
    for q in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some(n @ ('"' | '\\')) => out.push(n),
                Some(n) => {
                    out.push('\\');
                    out.push(n);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn parse_bool(value: &str) -> Option<bool> {
    match strip_quotes(value).trim().to_ascii_lowercase().as_str() {
        "true" | "yes" => Some(true),
        "false" | "no" => Some(false),
        _ => None,
    }
}

/// Extracts `class` (and optional `reason`) from the first fenced block
/// tagged `yaml`, or the first untagged fenced block with a `class:` line.
/// Never panics; anything unusable is a [`AgentError::ParseFailure`].
pub fn parse_response(raw: &str) -> Result<ParsedAnswer, AgentError> {
    let failure = || AgentError::ParseFailure {
        raw: raw.to_string(),
    };
    let blocks = fenced_blocks(raw);
    let block = blocks
        .iter()
        .find(|b| {
            let info = b.info.to_ascii_lowercase();
            info == "yaml"
                || info == "yml"
                || (info.is_empty() && b.lines.iter().any(|l| yaml_field(l, "class").is_some()))
        })
        .ok_or_else(failure)?;

    let decision = block
        .lines
        .iter()
        .find_map(|l| yaml_field(l, "class"))
        .and_then(parse_bool)
        .ok_or_else(failure)?;
    let reason = block
        .lines
        .iter()
        .find_map(|l| yaml_field(l, "reason"))
        .map(|r| unescape(strip_quotes(r)));
    Ok(ParsedAnswer { decision, reason })
}

/// Canonical fenced answer block. The reason is kept on a single line with
/// quotes escaped and backticks replaced, so the block can never open or
/// close another fence.
pub fn render_answer(decision: bool, reason: Option<&str>) -> String {
    let mut out = format!(
        "```yaml\nclass: {}\n",
        if decision { "True" } else { "False" }
    );
    if let Some(reason) = reason {
        let mut clean = String::with_capacity(reason.len() + 2);
        for c in reason.chars() {
            match c {
                '\\' => clean.push_str("\\\\"),
                '"' => clean.push_str("\\\""),
                '`' => clean.push('\''),
                '\n' | '\r' => clean.push(' '),
                c => clean.push(c),
            }
        }
        out.push_str(&format!("reason: \"{clean}\"\n"));
    }
    out.push_str("```");
    out
}

/// Key of a recorded response. `scope` separates single-agent runs from
/// each system/paradigm, since the same agent answers in all of them.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplayKey {
    pub scope: String,
    pub agent_id: String,
    pub instance_id: u64,
    pub round: u32,
}

impl std::fmt::Display for ReplayKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}/{} instance {} round {}",
            self.scope, self.agent_id, self.instance_id, self.round
        )
    }
}

/// In-memory record/replay store of raw responses.
#[derive(Debug, Default)]
pub struct TranscriptStore {
    entries: Mutex<BTreeMap<ReplayKey, String>>,
}

impl TranscriptStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, key: ReplayKey, raw: &str) -> Result<(), AgentError> {
        let mut entries = self.entries.lock().expect("transcript store poisoned");
        if entries.contains_key(&key) {
            return Err(AgentError::DuplicateEntry(key));
        }
        entries.insert(key, raw.to_string());
        Ok(())
    }

    pub fn get(&self, key: &ReplayKey) -> Option<String> {
        self.entries
            .lock()
            .expect("transcript store poisoned")
            .get(key)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries
            .lock()
            .expect("transcript store poisoned")
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn record_transcript_entry(
    store: &TranscriptStore,
    scope: &str,
    agent_id: &str,
    instance_id: u64,
    round: u32,
    response: &AgentResponse,
) -> Result<(), AgentError> {
    store.record(
        ReplayKey {
            scope: scope.to_string(),
            agent_id: agent_id.to_string(),
            instance_id,
            round,
        },
        &response.raw,
    )
}

/// What an agent can see when it is asked for a decision.
#[derive(Debug, Clone, Copy)]
pub struct InvokeContext<'a> {
    pub scope: &'a str,
    pub instance: &'a TabularInstance,
    pub round: u32,
    pub visible: &'a [DebateMessage],
}

pub trait Invoke: Send + Sync {
    fn invoke(
        &self,
        agent: &AgentSpec,
        prompt: &str,
        ctx: &InvokeContext<'_>,
    ) -> Result<AgentResponse, AgentError>;
}

/// Dispatches to the backend named in each [`AgentSpec`].
pub struct Invoker {
    replay: HashMap<PathBuf, Arc<TranscriptStore>>,
    http: Option<reqwest::blocking::Client>,
    backend_calls: AtomicU64,
}

impl Default for Invoker {
    fn default() -> Self {
        Self::new()
    }
}

impl Invoker {
    pub fn new() -> Self {
        Self {
            replay: HashMap::new(),
            http: None,
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn with_replay_store(
        mut self,
        path: impl Into<PathBuf>,
        store: Arc<TranscriptStore>,
    ) -> Self {
        self.replay.insert(path.into(), store);
        self
    }

    pub fn with_http(mut self) -> Result<Self, AgentError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| AgentError::Http(e.to_string()))?;
        self.http = Some(client);
        Ok(self)
    }

    /// Number of backend calls made so far (mock evaluations, replay
    /// lookups and HTTP requests alike).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    fn call_http(
        &self,
        endpoint: &HttpEndpoint,
        decoding: &Decoding,
        prompt: &str,
    ) -> Result<String, AgentError> {
        let client = self
            .http
            .as_ref()
            .ok_or_else(|| AgentError::Unavailable("http backends are disabled".into()))?;
        let key = std::env::var(&endpoint.api_key_env).map_err(|_| {
            AgentError::Http(format!(
                "environment variable `{}` is not set",
                endpoint.api_key_env
            ))
        })?;
        let request = ChatRequest {
            model: &endpoint.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: decoding.temperature,
            max_tokens: decoding.max_tokens,
        };
        let url = chat_url(&endpoint.base_url);
        let timeout = Duration::from_secs_f64(endpoint.timeout_secs.max(0.001));

        let mut attempt = 0u32;
        loop {
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            let result = client
                .post(&url)
                .bearer_auth(&key)
                .timeout(timeout)
                .json(&request)
                .send();
            let retry_after = match result {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let body: ChatResponse = resp.json().map_err(|e| {
                            AgentError::Http(format!("malformed response body: {e}"))
                        })?;
                        return body
                            .choices
                            .into_iter()
                            .next()
                            .map(|c| c.message.content)
                            .ok_or_else(|| AgentError::Http("response has no choices".into()));
                    }
                    if status.as_u16() != 429 && !status.is_server_error() {
                        return Err(AgentError::Http(format!("status {status}")));
                    }
                    if attempt >= endpoint.max_retries {
                        return Err(AgentError::Http(format!(
                            "status {status} after {} retries",
                            endpoint.max_retries
                        )));
                    }
                    resp.headers()
                        .get(reqwest::header::RETRY_AFTER)
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.trim().parse::<f64>().ok())
                        .map(Duration::from_secs_f64)
                }
                Err(e) => {
                    if attempt >= endpoint.max_retries {
                        // reqwest errors carry the URL, never headers
                        return Err(AgentError::Http(format!(
                            "{e} after {} retries",
                            endpoint.max_retries
                        )));
                    }
                    None
                }
            };
            let delay = retry_after.unwrap_or_else(|| backoff_delay(endpoint.backoff_ms, attempt));
            tracing::debug!(attempt, ?delay, model = %endpoint.model, "retrying chat request");
            std::thread::sleep(delay);
            attempt += 1;
        }
    }
}

/// Exponential backoff with multiplicative jitter in [0.5, 1.0), capped at
/// 30 seconds.
pub fn backoff_delay(base_ms: u64, attempt: u32) -> Duration {
    let exp = base_ms.saturating_mul(1u64 << attempt.min(16));
    let capped = exp.min(30_000) as f64;
    let jitter = rand::thread_rng().gen_range(0.5..1.0);
    Duration::from_secs_f64(capped * jitter / 1000.0)
}

fn chat_url(base: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with("/chat/completions") {
        base.to_string()
    } else {
        format!("{base}/chat/completions")
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Deserialize)]
struct ChatContent {
    #[serde(default)]
    content: String,
}

impl Invoke for Invoker {
    fn invoke(
        &self,
        agent: &AgentSpec,
        prompt: &str,
        ctx: &InvokeContext<'_>,
    ) -> Result<AgentResponse, AgentError> {
        if prompt.is_empty() {
            return Err(AgentError::EmptyPrompt);
        }
        match &agent.backend {
            Backend::Mock { rule } => {
                self.backend_calls.fetch_add(1, Ordering::Relaxed);
                let decision = rule.decide(ctx)?;
                let reason = format!("{} rule", rule.name());
                AgentResponse::from_raw(render_answer(decision, Some(&reason)), 0)
            }
            Backend::Replay { path } => {
                self.backend_calls.fetch_add(1, Ordering::Relaxed);
                let key = ReplayKey {
                    scope: ctx.scope.to_string(),
                    agent_id: agent.id.clone(),
                    instance_id: ctx.instance.id,
                    round: ctx.round,
                };
                let store = self.replay.get(path).ok_or_else(|| {
                    AgentError::Unavailable(format!("replay store {} not loaded", path.display()))
                })?;
                let raw = store.get(&key).ok_or(AgentError::ReplayMiss(key))?;
                AgentResponse::from_raw(raw, 0)
            }
            Backend::Http(endpoint) => {
                let raw = self.call_http(endpoint, &agent.decoding, prompt)?;
                match AgentResponse::from_raw(raw, 0) {
                    Ok(resp) => Ok(resp),
                    Err(AgentError::ParseFailure { .. }) => {
                        tracing::warn!(agent = %agent.id, instance = ctx.instance.id, "unparseable reply, re-requesting once");
                        let raw = self.call_http(endpoint, &agent.decoding, prompt)?;
                        AgentResponse::from_raw(raw, 1)
                    }
                    Err(e) => Err(e),
                }
            }
        }
    }
}
