//! Chat-completion gateway with two transports and strict decision parsing.
//!
//! The wire transport speaks the OpenAI-compatible chat-completions JSON
//! protocol; the mock transport replays scripted responses from a
//! tag-indexed FIFO so optimization runs are fully testable offline. Every
//! call is appended to an ordered audit log with token counts.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trading_env::Action;

/// Call-site label; keys the mock script, the audit log, and token totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CallTag {
    #[serde(rename = "selector-act")]
    SelectorAct,
    #[serde(rename = "trader-act")]
    TraderAct,
    #[serde(rename = "trader-critic")]
    TraderCritic,
    #[serde(rename = "trader-update")]
    TraderUpdate,
    #[serde(rename = "selector-critic")]
    SelectorCritic,
    #[serde(rename = "selector-update")]
    SelectorUpdate,
}

impl CallTag {
    pub const ALL: [CallTag; 6] = [
        CallTag::SelectorAct,
        CallTag::TraderAct,
        CallTag::TraderCritic,
        CallTag::TraderUpdate,
        CallTag::SelectorCritic,
        CallTag::SelectorUpdate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CallTag::SelectorAct => "selector-act",
            CallTag::TraderAct => "trader-act",
            CallTag::TraderCritic => "trader-critic",
            CallTag::TraderUpdate => "trader-update",
            CallTag::SelectorCritic => "selector-critic",
            CallTag::SelectorUpdate => "selector-update",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s)
    }
}

impl std::fmt::Display for CallTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub system_prompt: String,
    pub user_payload: String,
    /// Defaults to 0 to minimize sampling randomness.
    pub temperature: f64,
    pub tag: CallTag,
}

impl CompletionRequest {
    pub fn new(tag: CallTag, system_prompt: impl Into<String>, user_payload: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_payload: user_payload.into(),
            temperature: 0.0,
            tag,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// True when token counts are 4-chars-per-token estimates rather than
    /// transport-reported usage.
    pub estimated_tokens: bool,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("mock script exhausted for tag {0}")]
    MockExhausted(CallTag),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    TransportFailed { attempts: u32, message: String },
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("failed to read fixture {path}: {message}")]
    Fixture { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Model-output problems, distinct from transport problems; callers retry
/// then fall back on these.
#[derive(Debug, Error, PartialEq)]
pub enum DecisionError {
    #[error("unparseable model output: {0}")]
    Parse(String),
    #[error("invalid decision: {0}")]
    Validation(String),
}

/// One transport attempt's failure; `retryable` drives the backoff budget.
#[derive(Debug)]
pub struct TransportError {
    pub message: String,
    pub retryable: bool,
}

pub trait Transport: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, TransportError>;
}

/// ceil(chars / 4), the conventional rough token estimate.
fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64 + 3) / 4
}

#[derive(Debug, Deserialize)]
struct FixtureRecord {
    tag: String,
    response: String,
    #[serde(default)]
    repeat: Option<u32>,
}

/// Deterministic scripted transport: each tag owns a FIFO of responses.
/// An exhausted FIFO is a hard error naming the tag.
pub struct MockTransport {
    queues: Mutex<BTreeMap<CallTag, VecDeque<String>>>,
}

impl MockTransport {
    pub fn new() -> Self {
        Self {
            queues: Mutex::new(BTreeMap::new()),
        }
    }

    /// Loads a JSON-lines fixture of `{"tag", "response"}` records (an
    /// optional `"repeat": n` enqueues the response n times).
    pub fn from_fixture(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let file = File::open(path).map_err(|e| GatewayError::Fixture {
            path: path_str.clone(),
            message: e.to_string(),
        })?;
        let mock = Self::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord =
                serde_json::from_str(&line).map_err(|e| GatewayError::Fixture {
                    path: path_str.clone(),
                    message: format!("line {}: {e}", idx + 1),
                })?;
            let tag = CallTag::parse(&record.tag).ok_or_else(|| GatewayError::Fixture {
                path: path_str.clone(),
                message: format!("line {}: unknown tag {:?}", idx + 1, record.tag),
            })?;
            mock.push_many(tag, &record.response, record.repeat.unwrap_or(1));
        }
        Ok(mock)
    }

    pub fn push(&self, tag: CallTag, response: impl Into<String>) {
        self.push_many(tag, &response.into(), 1);
    }

    pub fn push_many(&self, tag: CallTag, response: &str, times: u32) {
        let mut queues = self.queues.lock().expect("mock lock");
        let queue = queues.entry(tag).or_default();
        for _ in 0..times {
            queue.push_back(response.to_string());
        }
    }

    pub fn remaining(&self, tag: CallTag) -> usize {
        self.queues
            .lock()
            .expect("mock lock")
            .get(&tag)
            .map(|q| q.len())
            .unwrap_or(0)
    }
}

impl Default for MockTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for MockTransport {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, TransportError> {
        let mut queues = self.queues.lock().expect("mock lock");
        let text = queues
            .get_mut(&request.tag)
            .and_then(|q| q.pop_front())
            .ok_or_else(|| TransportError {
                message: format!("mock script exhausted for tag {}", request.tag),
                retryable: false,
            })?;
        Ok(CompletionResult {
            tokens_in: estimate_tokens(&request.system_prompt)
                + estimate_tokens(&request.user_payload),
            tokens_out: estimate_tokens(&text),
            text,
            estimated_tokens: true,
        })
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

/// OpenAI-compatible chat-completions client. Endpoint, model, and
/// credential come from `MOIRA_API_BASE`, `MOIRA_MODEL`, `MOIRA_API_KEY`
/// (or explicit constructor arguments).
pub struct WireTransport {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
    model: String,
}

impl WireTransport {
    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        model: impl Into<String>,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(180))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            model: model.into(),
        })
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        let var = |name: &str| {
            std::env::var(name)
                .map_err(|_| GatewayError::Config(format!("{name} is not set")))
        };
        Self::new(var("MOIRA_API_BASE")?, var("MOIRA_API_KEY")?, var("MOIRA_MODEL")?)
    }
}

impl Transport for WireTransport {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, TransportError> {
        let body = WireRequest {
            model: &self.model,
            messages: vec![
                WireMessage {
                    role: "system",
                    content: &request.system_prompt,
                },
                WireMessage {
                    role: "user",
                    content: &request.user_payload,
                },
            ],
            temperature: request.temperature,
        };
        let response = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| TransportError {
                message: e.to_string(),
                retryable: true,
            })?;
        let status = response.status();
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            let text = response.text().unwrap_or_default();
            return Err(TransportError {
                message: format!("HTTP {status}: {text}"),
                retryable,
            });
        }
        let parsed: WireResponse = response.json().map_err(|e| TransportError {
            message: format!("bad response body: {e}"),
            retryable: false,
        })?;
        let choice = parsed.choices.into_iter().next().ok_or(TransportError {
            message: "response has no choices".to_string(),
            retryable: false,
        })?;
        let text = choice.message.content;
        let usage = parsed.usage;
        let reported_in = usage.as_ref().and_then(|u| u.prompt_tokens);
        let reported_out = usage.as_ref().and_then(|u| u.completion_tokens);
        let estimated = reported_in.is_none() || reported_out.is_none();
        Ok(CompletionResult {
            tokens_in: reported_in.unwrap_or_else(|| {
                estimate_tokens(&request.system_prompt) + estimate_tokens(&request.user_payload)
            }),
            tokens_out: reported_out.unwrap_or_else(|| estimate_tokens(&text)),
            text,
            estimated_tokens: estimated,
        })
    }
}

/// One audit line: `{seq, tag, tokens_in, tokens_out, sha256}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub tag: CallTag,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Hex SHA-256 of the raw response text.
    pub sha256: String,
}

/// Per-tag aggregation of the audit log (calls, average, total).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenUsageRow {
    pub tag: CallTag,
    pub calls: u64,
    pub tokens_per_call: u64,
    pub total_tokens: u64,
}

/// Transport wrapper that owns the ordered audit log and the retry budget
/// for transient transport failures.
pub struct Gateway {
    transport: Box<dyn Transport>,
    audit: Mutex<Vec<AuditRecord>>,
    max_attempts: u32,
    backoff: Duration,
}

fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    format!("{:x}", hasher.finalize())
}

impl Gateway {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Self {
            transport,
            audit: Mutex::new(Vec::new()),
            max_attempts: 3,
            backoff: Duration::from_millis(250),
        }
    }

    pub fn with_retry(mut self, max_attempts: u32, backoff: Duration) -> Self {
        self.max_attempts = max_attempts.max(1);
        self.backoff = backoff;
        self
    }

    /// Completes a request, retrying transient transport failures with
    /// exponential backoff. Every successful call lands in the audit log.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let mut attempt = 0;
        let result = loop {
            attempt += 1;
            match self.transport.complete(request) {
                Ok(result) => break result,
                Err(err) if err.retryable && attempt < self.max_attempts => {
                    log::warn!(
                        "transport attempt {attempt} for {} failed: {}",
                        request.tag,
                        err.message
                    );
                    std::thread::sleep(self.backoff * 2_u32.pow(attempt - 1));
                }
                Err(err) if err.message.contains("mock script exhausted") => {
                    return Err(GatewayError::MockExhausted(request.tag));
                }
                Err(err) => {
                    return Err(GatewayError::TransportFailed {
                        attempts: attempt,
                        message: err.message,
                    });
                }
            }
        };
        let mut audit = self.audit.lock().expect("audit lock");
        audit.push(AuditRecord {
            seq: audit.len() as u64,
            tag: request.tag,
            tokens_in: result.tokens_in,
            tokens_out: result.tokens_out,
            sha256: sha256_hex(&result.text),
        });
        Ok(result)
    }

    pub fn audit_log(&self) -> Vec<AuditRecord> {
        self.audit.lock().expect("audit lock").clone()
    }

    pub fn audit_len(&self) -> usize {
        self.audit.lock().expect("audit lock").len()
    }

    pub fn write_audit_jsonl(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        let mut file = File::create(path)?;
        for record in self.audit_log() {
            writeln!(file, "{}", serde_json::to_string(&record).expect("serializable"))?;
        }
        Ok(())
    }

    /// Per-tag usage rows over all six tags (zero rows included so the
    /// table shape is stable).
    pub fn token_usage(&self) -> Vec<TokenUsageRow> {
        let audit = self.audit.lock().expect("audit lock");
        CallTag::ALL
            .iter()
            .map(|tag| {
                let mut calls = 0;
                let mut total = 0;
                for record in audit.iter().filter(|r| r.tag == *tag) {
                    calls += 1;
                    total += record.tokens_in + record.tokens_out;
                }
                TokenUsageRow {
                    tag: *tag,
                    calls,
                    tokens_per_call: if calls == 0 { 0 } else { total / calls },
                    total_tokens: total,
                }
            })
            .collect()
    }
}

/// Drops a surrounding markdown code fence (```json ... ```), if present.
pub fn strip_code_fences(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let body = match rest.split_once('\n') {
        Some((_lang, body)) => body,
        None => return trimmed,
    };
    body.trim_end()
        .strip_suffix("```")
        .map(str::trim)
        .unwrap_or(trimmed)
}

/// Selector output: `{"pair": ["T1", "T2"], "rationale": "..."}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDecision {
    /// Tickers in the order the model presented them.
    pub pair: (String, String),
    pub rationale: String,
}

#[derive(Deserialize)]
struct RawPairDecision {
    pair: Vec<String>,
    #[serde(default)]
    rationale: String,
}

pub fn parse_pair_decision(
    text: &str,
    allowed_symbols: &[String],
) -> Result<PairDecision, DecisionError> {
    let raw: RawPairDecision = serde_json::from_str(strip_code_fences(text))
        .map_err(|e| DecisionError::Parse(e.to_string()))?;
    if raw.pair.len() != 2 {
        return Err(DecisionError::Validation(format!(
            "expected exactly 2 tickers, got {}",
            raw.pair.len()
        )));
    }
    let first = raw.pair[0].trim().to_ascii_uppercase();
    let second = raw.pair[1].trim().to_ascii_uppercase();
    if first == second {
        return Err(DecisionError::Validation(format!(
            "pair tickers must be distinct, got {first}/{second}"
        )));
    }
    for ticker in [&first, &second] {
        if !allowed_symbols.iter().any(|s| s.eq_ignore_ascii_case(ticker)) {
            return Err(DecisionError::Validation(format!(
                "ticker {ticker} is not in allowed_symbols"
            )));
        }
    }
    Ok(PairDecision {
        pair: (first, second),
        rationale: raw.rationale,
    })
}

/// Trader output: `{"action": "long|short|close|hold", "rationale": "..."}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeDecision {
    pub action: Action,
    pub rationale: String,
}

#[derive(Deserialize)]
struct RawTradeDecision {
    action: String,
    #[serde(default)]
    rationale: String,
}

pub fn parse_trade_decision(
    text: &str,
    permissible: &[Action],
) -> Result<TradeDecision, DecisionError> {
    if permissible.is_empty() {
        return Err(DecisionError::Validation(
            "permissible action set is empty".to_string(),
        ));
    }
    let raw: RawTradeDecision = serde_json::from_str(strip_code_fences(text))
        .map_err(|e| DecisionError::Parse(e.to_string()))?;
    let action = Action::parse(&raw.action).ok_or_else(|| {
        DecisionError::Validation(format!("unknown action {:?}", raw.action))
    })?;
    if !permissible.contains(&action) {
        return Err(DecisionError::Validation(format!(
            "action {action} is not permissible (allowed: {})",
            permissible
                .iter()
                .map(Action::as_str)
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    Ok(TradeDecision {
        action,
        rationale: raw.rationale,
    })
}
