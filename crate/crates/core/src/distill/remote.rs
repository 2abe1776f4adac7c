//! Chat-completion client, retry policy and the on-disk response cache.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{parse_distilled, DistillError, DistillPrompt, DistilledReport, Provenance};
use crate::corpus::EntityLexicon;

pub const DEFAULT_API_KEY_ENV: &str = "ECAMP_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: &str) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// One request, one answer. Retrying is the caller's job.
pub trait ChatTransport: Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, TransportError>;
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    /// Requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub auth_header: String,
    pub max_attempts: usize,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            auth_header: "Authorization".into(),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
        }
    }
}

pub struct HttpChatClient {
    config: EndpointConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    /// Reads the credential from `config.api_key_env`.
    pub fn from_env(config: EndpointConfig) -> Result<Self, DistillError> {
        let key = std::env::var(&config.api_key_env)
            .map_err(|_| DistillError::MissingCredential(config.api_key_env.clone()))?;
        Ok(Self::with_key(config, Some(key)))
    }

    pub fn with_key(config: EndpointConfig, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, api_key, agent }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

impl ChatTransport for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, TransportError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": 0,
        });
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header(self.config.auth_header.as_str(), &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| TransportError(e.to_string()))?;
        let parsed: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError("response has no choices".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheRecord {
    raw: String,
    status: String,
}

/// One JSON file per key; writes go through a temp file and a rename so
/// readers never see partial records.
#[derive(Debug, Clone)]
pub struct DistillCache {
    dir: PathBuf,
}

impl DistillCache {
    pub fn open(dir: &Path) -> Result<Self, DistillError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    /// Hex SHA-256 of report text, entity list and template hash.
    pub fn key(prompt: &DistillPrompt) -> String {
        let mut h = Sha256::new();
        h.update(prompt.report.as_bytes());
        h.update([0u8]);
        h.update(prompt.entity_slot().as_bytes());
        h.update([0u8]);
        h.update(prompt.template_hash().as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str::<CacheRecord>(&text).ok().map(|r| r.raw)
    }

    pub fn put(&self, key: &str, raw: &str, parsed: bool) -> Result<(), DistillError> {
        let record = CacheRecord {
            raw: raw.into(),
            status: if parsed { "ok" } else { "unparseable" }.into(),
        };
        let text = serde_json::to_string(&record).expect("cache record serializes");
        let tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        fs::write(tmp.path(), text).map_err(|e| io_err(tmp.path(), e))?;
        let dest = self.path(key);
        tmp.persist(&dest).map_err(|e| io_err(&dest, e.error))?;
        Ok(())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> DistillError {
    DistillError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn complete_with_retry(
    transport: &dyn ChatTransport,
    messages: &[ChatMessage],
    attempts: usize,
    backoff: Duration,
) -> Result<String, DistillError> {
    let attempts = attempts.max(1);
    let mut delay = backoff;
    let mut last = String::new();
    for attempt in 1..=attempts {
        match transport.complete(messages) {
            Ok(text) => return Ok(text),
            Err(e) => {
                log::warn!("chat request attempt {attempt}/{attempts} failed: {e}");
                last = e.0;
            }
        }
        if attempt < attempts {
            thread::sleep(delay);
            delay *= 2;
        }
    }
    Err(DistillError::Endpoint { attempts, last })
}

/// Cache lookup, else a retried request; the answer is cached whether or
/// not it parses.
pub fn distill_remote(
    prompt: &DistillPrompt,
    transport: &dyn ChatTransport,
    cache: Option<&DistillCache>,
    lex: &EntityLexicon,
    max_attempts: usize,
    backoff: Duration,
) -> Result<DistilledReport, DistillError> {
    let key = DistillCache::key(prompt);
    if let Some(raw) = cache.and_then(|c| c.get(&key)) {
        let parsed = parse_distilled(&raw, lex)?;
        return Ok(DistilledReport {
            sentences: parsed.sentences,
            raw,
            provenance: Provenance::Cached,
        });
    }
    let raw = complete_with_retry(transport, &prompt.messages(), max_attempts, backoff)?;
    let parsed = parse_distilled(&raw, lex);
    if let Some(c) = cache {
        c.put(&key, &raw, parsed.is_ok())?;
    }
    Ok(DistilledReport {
        sentences: parsed?.sentences,
        raw,
        provenance: Provenance::Remote,
    })
}

/// Runs [`distill_remote`] over `prompts` with at most `parallelism` requests
/// in flight. Results keep the input order.
pub fn distill_batch(
    prompts: &[DistillPrompt],
    transport: &dyn ChatTransport,
    cache: Option<&DistillCache>,
    lex: &EntityLexicon,
    parallelism: usize,
    max_attempts: usize,
    backoff: Duration,
) -> Vec<Result<DistilledReport, DistillError>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<DistilledReport, DistillError>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..parallelism.clamp(1, prompts.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                let out = distill_remote(prompt, transport, cache, lex, max_attempts, backoff);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}
