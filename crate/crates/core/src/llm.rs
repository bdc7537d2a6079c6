//! Completion gateway over the chat-completions wire protocol.
//!
//! Four backends share the [`CompletionBackend`] trait: a live HTTP client
//! with bounded retry, a recorder that wraps any backend and appends to a
//! JSON-lines cassette, a replayer that serves exact fingerprint matches from
//! a cassette, and a scripted mock keyed by request tag.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::rng::sha256_hex;

/// Environment variable holding the API credential.
pub const API_KEY_ENV: &str = "GDA_API_KEY";
/// Fallback credential variable.
pub const FALLBACK_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo-0125";
pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    pub request_tag: String,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::InvalidRequest(format!(
                "`{}` has no messages",
                self.request_tag
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidRequest(format!(
                "`{}` has temperature {}",
                self.request_tag, self.temperature
            )));
        }
        Ok(())
    }

    /// SHA-256 over a fixed positional encoding of model, temperature, tag and
    /// messages, so it does not depend on how the request struct serializes.
    pub fn fingerprint(&self) -> String {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| json!([m.role.as_str(), m.content]))
            .collect();
        let canonical = json!([
            self.model_id,
            self.temperature,
            self.request_tag,
            messages
        ]);
        sha256_hex(canonical.to_string())
    }

    /// Chat-completions request body.
    pub fn wire_body(&self) -> Value {
        let mut body = json!({
            "model": self.model_id,
            "messages": self.messages,
            "temperature": self.temperature,
        });
        if let Some(n) = self.max_tokens {
            body["max_tokens"] = json!(n);
        }
        body
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt_tokens += rhs.prompt_tokens;
        self.completion_tokens += rhs.completion_tokens;
        self.total_tokens += rhs.total_tokens;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Record,
    Replay,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub model_id: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub backend: BackendKind,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult>;

    fn kind(&self) -> BackendKind;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        (**self).complete(request)
    }

    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
}

/// Counting gate capping concurrent in-flight calls.
#[derive(Debug)]
struct Gate {
    max: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            busy: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut busy = self.busy.lock().expect("gate poisoned");
        while *busy >= self.max {
            busy = self.freed.wait(busy).expect("gate poisoned");
        }
        *busy += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut busy = self.0.busy.lock().expect("gate poisoned");
        *busy -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts count from 1).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.saturating_sub(1).min(16);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

pub fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// HTTP client for `<base_url>/chat/completions`.
pub struct LiveBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
    gate: Gate,
}

impl LiveBackend {
    pub fn new(base_url: &str, api_key: Option<String>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build();
        Self {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            agent: config.into(),
            retry,
            gate: Gate::new(max_in_flight),
        }
    }

    /// Reads the credential from [`API_KEY_ENV`], then [`FALLBACK_API_KEY_ENV`].
    pub fn from_env(base_url: &str, max_in_flight: usize) -> Self {
        let key = std::env::var(API_KEY_ENV)
            .or_else(|_| std::env::var(FALLBACK_API_KEY_ENV))
            .ok()
            .filter(|k| !k.is_empty());
        Self::new(base_url, key, RetryPolicy::default(), max_in_flight)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, body: &Value) -> std::result::Result<(u16, Option<u64>, String), String> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok());
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, retry_after, text))
    }
}

fn parse_chat_response(tag: &str, body: &str) -> Result<(String, Option<String>, Usage)> {
    let fail = |message: String| Error::Backend {
        tag: tag.to_string(),
        message,
    };
    let v: Value = serde_json::from_str(body).map_err(|e| fail(format!("response is not JSON: {e}")))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| fail("response lacks choices[0].message.content".into()))?
        .to_string();
    let model = v.get("model").and_then(Value::as_str).map(str::to_string);
    let usage = v
        .get("usage")
        .and_then(|u| serde_json::from_value::<Usage>(u.clone()).ok())
        .unwrap_or_default();
    Ok((text, model, usage))
}

impl CompletionBackend for LiveBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        request.validate()?;
        let _slot = self.gate.enter();
        let body = request.wire_body();
        let started = Instant::now();
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts {
            let wait = match self.attempt(&body) {
                Ok((status, _, text)) if (200..300).contains(&status) => {
                    let (text, model, usage) = parse_chat_response(&request.request_tag, &text)?;
                    return Ok(CompletionResult {
                        text,
                        model_id: model.unwrap_or_else(|| request.model_id.clone()),
                        usage,
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend: BackendKind::Live,
                    });
                }
                Ok((status, retry_after, text)) if is_retryable_status(status) => {
                    last = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
                    retry_after
                        .map(Duration::from_secs)
                        .unwrap_or_else(|| self.retry.delay_after(attempt))
                        .min(self.retry.max_delay)
                }
                Ok((status, _, text)) => {
                    return Err(Error::Backend {
                        tag: request.request_tag.clone(),
                        message: format!("HTTP {status}: {}", text.chars().take(500).collect::<String>()),
                    });
                }
                Err(transport) => {
                    last = transport;
                    self.retry.delay_after(attempt)
                }
            };
            log::warn!(
                "request `{}` attempt {attempt}/{} failed: {last}",
                request.request_tag,
                self.retry.max_attempts
            );
            if attempt < self.retry.max_attempts {
                std::thread::sleep(wait);
            }
        }
        Err(Error::Backend {
            tag: request.request_tag.clone(),
            message: format!("gave up after {} attempts: {last}", self.retry.max_attempts),
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }
}

/// Response fields stored in a cassette record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedResponse {
    pub text: String,
    pub model_id: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

/// One JSON line of a cassette.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CassetteRecord {
    pub fingerprint: String,
    pub request: CompletionRequest,
    pub response: RecordedResponse,
}

impl CassetteRecord {
    pub fn new(request: &CompletionRequest, result: &CompletionResult) -> Self {
        Self {
            fingerprint: request.fingerprint(),
            request: request.clone(),
            response: RecordedResponse {
                text: result.text.clone(),
                model_id: result.model_id.clone(),
                usage: result.usage,
                latency_ms: result.latency_ms,
            },
        }
    }
}

/// Append-only request/response log, indexed by fingerprint.
#[derive(Debug, Clone, Default)]
pub struct Cassette {
    records: Vec<CassetteRecord>,
    index: HashMap<String, usize>,
    digest: String,
}

impl Cassette {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cassette = Cassette {
            digest: sha256_hex(text),
            ..Default::default()
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: CassetteRecord = serde_json::from_str(line).map_err(|e| Error::CassetteLoad {
                line: i + 1,
                message: e.to_string(),
            })?;
            let actual = record.request.fingerprint();
            if actual != record.fingerprint {
                return Err(Error::CassetteLoad {
                    line: i + 1,
                    message: format!(
                        "stored fingerprint {} does not match request ({actual})",
                        record.fingerprint
                    ),
                });
            }
            cassette.push(record);
        }
        Ok(cassette)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn push(&mut self, record: CassetteRecord) {
        if !self.index.contains_key(&record.fingerprint) {
            self.index.insert(record.fingerprint.clone(), self.records.len());
            self.records.push(record);
        }
    }

    pub fn get(&self, fingerprint: &str) -> Option<&CassetteRecord> {
        self.index.get(fingerprint).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[CassetteRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// SHA-256 of the cassette file contents as loaded.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

pub struct ReplayBackend {
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(cassette: Cassette) -> Self {
        Self { cassette }
    }

    pub fn cassette(&self) -> &Cassette {
        &self.cassette
    }
}

pub fn open_replay(cassette_path: impl AsRef<Path>) -> Result<ReplayBackend> {
    Cassette::load(cassette_path).map(ReplayBackend::new)
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        request.validate()?;
        let fingerprint = request.fingerprint();
        let record = self.cassette.get(&fingerprint).ok_or_else(|| Error::ReplayMiss {
            tag: request.request_tag.clone(),
            fingerprint,
        })?;
        Ok(CompletionResult {
            text: record.response.text.clone(),
            model_id: record.response.model_id.clone(),
            usage: record.response.usage,
            latency_ms: record.response.latency_ms,
            backend: BackendKind::Replay,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }
}

/// Wraps a backend and appends every successful exchange to a cassette.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    sink: Mutex<(File, HashSet<String>)>,
}

/// Opens (or creates) `cassette_path` for appending and records every
/// completion served by `inner`. Exchanges already present are not repeated.
pub fn record_session<B: CompletionBackend>(
    cassette_path: impl AsRef<Path>,
    inner: B,
) -> Result<RecordingBackend<B>> {
    let path = cassette_path.as_ref().to_path_buf();
    let known: HashSet<String> = if path.exists() {
        Cassette::load(&path)?
            .records()
            .iter()
            .map(|r| r.fingerprint.clone())
            .collect()
    } else {
        HashSet::new()
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok(RecordingBackend {
        inner,
        path,
        sink: Mutex::new((file, known)),
    })
}

impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let result = self.inner.complete(request)?;
        let record = CassetteRecord::new(request, &result);
        let mut sink = self.sink.lock().expect("cassette lock poisoned");
        if sink.1.insert(record.fingerprint.clone()) {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            sink.0
                .write_all(line.as_bytes())
                .and_then(|_| sink.0.flush())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(CompletionResult {
            backend: BackendKind::Record,
            ..result
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Record
    }
}

type Responder = dyn Fn(&CompletionRequest) -> Option<String> + Send + Sync;

/// Scripted backend: responses are queued per request tag. An optional
/// responder function answers tags without a script.
pub struct MockBackend {
    script: Mutex<HashMap<String, VecDeque<String>>>,
    responder: Option<Box<Responder>>,
    model_id: String,
}

impl MockBackend {
    pub fn from_script<I, S>(script: I) -> Self
    where
        I: IntoIterator<Item = (String, Vec<S>)>,
        S: Into<String>,
    {
        Self {
            script: Mutex::new(
                script
                    .into_iter()
                    .map(|(k, v)| (k, v.into_iter().map(Into::into).collect()))
                    .collect(),
            ),
            responder: None,
            model_id: "mock".into(),
        }
    }

    pub fn with_responder(
        responder: impl Fn(&CompletionRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: Mutex::new(HashMap::new()),
            responder: Some(Box::new(responder)),
            model_id: "mock".into(),
        }
    }

    /// Loads a JSON object mapping request tags to arrays of reply texts.
    pub fn load_script(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let script: HashMap<String, Vec<String>> = serde_json::from_str(&text)?;
        Ok(Self::from_script(script))
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        request.validate()?;
        let scripted = {
            let mut script = self.script.lock().expect("mock lock poisoned");
            script.get_mut(&request.request_tag).and_then(VecDeque::pop_front)
        };
        let text = scripted
            .or_else(|| self.responder.as_ref().and_then(|f| f(request)))
            .ok_or_else(|| Error::MockExhausted {
                tag: request.request_tag.clone(),
            })?;
        Ok(CompletionResult {
            text,
            model_id: self.model_id.clone(),
            usage: Usage::default(),
            latency_ms: 0,
            backend: BackendKind::Mock,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(tag: &str) -> CompletionRequest {
        CompletionRequest {
            model_id: DEFAULT_MODEL.into(),
            messages: vec![Message::system("sys"), Message::user("hello")],
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: None,
            request_tag: tag.into(),
        }
    }

    #[test]
    fn wire_body_shape() {
        let body = request("t").wire_body();
        assert_eq!(body["model"], "gpt-3.5-turbo-0125");
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["messages"][1]["content"], "hello");
        assert!(body.get("max_tokens").is_none());
    }

    #[test]
    fn fingerprint_ignores_serialization_order_and_tracks_content() {
        let a = request("t");
        let reordered: CompletionRequest = serde_json::from_str(
            r#"{"request_tag":"t","temperature":1.0,
                "messages":[{"content":"sys","role":"system"},{"content":"hello","role":"user"}],
                "model_id":"gpt-3.5-turbo-0125"}"#,
        )
        .unwrap();
        assert_eq!(a.fingerprint(), reordered.fingerprint());
        assert_ne!(a.fingerprint(), request("u").fingerprint());
        let mut warm = request("t");
        warm.temperature = 0.7;
        assert_ne!(a.fingerprint(), warm.fingerprint());
        let mut capped = request("t");
        capped.max_tokens = Some(64);
        assert_eq!(a.fingerprint(), capped.fingerprint());
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let mut r = request("t");
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = request("t");
        r.temperature = -1.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn mock_serves_script_then_exhausts() {
        let mock = MockBackend::from_script([("t".to_string(), vec!["one", "two"])]);
        assert_eq!(mock.complete(&request("t")).unwrap().text, "one");
        assert_eq!(mock.complete(&request("t")).unwrap().text, "two");
        assert!(matches!(
            mock.complete(&request("t")),
            Err(Error::MockExhausted { tag }) if tag == "t"
        ));
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mock = MockBackend::with_responder(|r| Some(format!("reply to {}", r.request_tag)));
        let rec = record_session(&path, mock).unwrap();
        for tag in ["a", "b", "c", "a"] {
            rec.complete(&request(tag)).unwrap();
        }
        drop(rec);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);

        let replay = open_replay(&path).unwrap();
        assert_eq!(replay.cassette().len(), 3);
        let got = replay.complete(&request("b")).unwrap();
        assert_eq!(got.text, "reply to b");
        assert_eq!(got.backend, BackendKind::Replay);
        match replay.complete(&request("zzz")) {
            Err(Error::ReplayMiss { tag, fingerprint }) => {
                assert_eq!(tag, "zzz");
                assert_eq!(fingerprint, request("zzz").fingerprint());
            }
            other => panic!("expected miss, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_line_reports_line_number() {
        let rec = CassetteRecord::new(
            &request("a"),
            &CompletionResult {
                text: "x".into(),
                model_id: "m".into(),
                usage: Usage::default(),
                latency_ms: 1,
                backend: BackendKind::Mock,
            },
        );
        let good = serde_json::to_string(&rec).unwrap();
        let text = format!("{good}\n{}\n", &good[..good.len() / 2]);
        assert!(matches!(
            Cassette::parse(&text),
            Err(Error::CassetteLoad { line: 2, .. })
        ));

        let mut tampered = rec.clone();
        tampered.request.request_tag = "b".into();
        let text = serde_json::to_string(&tampered).unwrap();
        assert!(matches!(
            Cassette::parse(&text),
            Err(Error::CassetteLoad { line: 1, .. })
        ));
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.delay_after(1), Duration::from_millis(100));
        assert_eq!(p.delay_after(2), Duration::from_millis(200));
        assert_eq!(p.delay_after(3), Duration::from_millis(350));
        assert!(is_retryable_status(429));
        assert!(is_retryable_status(503));
        assert!(!is_retryable_status(400));
    }
}
