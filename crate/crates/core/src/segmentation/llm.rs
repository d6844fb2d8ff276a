//! LLM-backed decomposition with a JSON-lines response cache.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{decompose_rule_with, Decomposition, Event, EventSource, SegmentationError, Strategy};
use crate::data::CaptionRecord;

pub const ENV_ENDPOINT: &str = "EVMOTION_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "EVMOTION_LLM_API_KEY";
pub const ENV_MODEL: &str = "EVMOTION_LLM_MODEL";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("{0}")]
    Transport(String),
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String, LlmError>;
}

impl<F> LlmClient for F
where
    F: Fn(&str, &str) -> Result<String, LlmError> + Send + Sync,
{
    fn complete(&self, system: &str, user: &str) -> Result<String, LlmError> {
        self(system, user)
    }
}

/// Segmentation instructions sent as the system message.
#[derive(Clone, Copy, Debug)]
pub struct Template {
    pub strategy: Strategy,
    pub text: &'static str,
}

impl Template {
    pub fn for_strategy(strategy: Strategy) -> Self {
        let text = match strategy {
            Strategy::EventAware => include_str!("../../templates/event_aware.txt"),
            Strategy::VerbAware => include_str!("../../templates/verb_aware.txt"),
        };
        Self { strategy, text }
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

/// OpenAI-compatible chat completion endpoint.
pub struct HttpLlm {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    model: String,
}

impl HttpLlm {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(120))).build().into();
        Self { agent, endpoint: endpoint.into(), api_key, model: model.into() }
    }

    /// `None` when no endpoint is configured.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT).ok().filter(|s| !s.is_empty())?;
        let key = std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty());
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gemini-2.5-flash".to_string());
        Some(Self::new(endpoint, key, model))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl LlmClient for HttpLlm {
    fn complete(&self, system: &str, user: &str) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0.0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| LlmError::Transport(e.to_string()))?;
        let parsed: ChatResponse = resp.body_mut().read_json().map_err(|e| LlmError::Transport(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::Transport("response has no choices".into()))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    response: String,
    timestamp: u64,
}

/// Raw responses keyed by (template hash, prompt line). Appends are whole
/// lines; concurrent writers of the same key write identical content.
pub struct ResponseCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, String>>,
}

impl ResponseCache {
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(fs::File::open(&path)?).lines() {
                let line = line?;
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(entry.key, entry.response);
                }
            }
        }
        Ok(Self { path, entries: Mutex::new(entries) })
    }

    pub fn key(template_hash: &str, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(template_hash.as_bytes());
        h.update(b"\n");
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().map(|e| e.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().ok()?.get(key).cloned()
    }

    pub fn put(&self, key: &str, response: &str) -> std::io::Result<()> {
        let mut entries = self.entries.lock().map_err(|_| std::io::Error::other("cache lock poisoned"))?;
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let line = serde_json::to_string(&CacheLine { key: key.into(), response: response.into(), timestamp })
            .map_err(std::io::Error::other)?;
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(format!("{line}\n").as_bytes())?;
        entries.insert(key.into(), response.into());
        Ok(())
    }
}

fn parse_response(prompt: &CaptionRecord, raw: &str, strategy: Strategy) -> Result<Decomposition, String> {
    let mut events = Vec::new();
    for line in raw.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let c = CaptionRecord::parse(line).map_err(|e| e.to_string())?;
        events.push(Event::from_caption(c, events.len() + 1, EventSource::Llm));
    }
    if events.is_empty() {
        return Err("empty response".into());
    }
    Ok(Decomposition { prompt: prompt.clone(), events, strategy })
}

/// One retry on an unparseable response; only parseable responses are cached.
pub fn decompose_llm(
    prompt: &CaptionRecord,
    strategy: Strategy,
    llm: &dyn LlmClient,
    cache: Option<&ResponseCache>,
) -> Result<Decomposition, SegmentationError> {
    let template = Template::for_strategy(strategy);
    let user = prompt.to_line();
    let key = ResponseCache::key(&template.hash(), &user);
    if let Some(raw) = cache.and_then(|c| c.get(&key)) {
        if let Ok(d) = parse_response(prompt, &raw, strategy) {
            return Ok(d);
        }
    }
    let mut last_err = String::new();
    for _ in 0..2 {
        let raw = llm.complete(template.text, &user).map_err(|e| SegmentationError::LlmTransport(e.to_string()))?;
        match parse_response(prompt, &raw, strategy) {
            Ok(d) => {
                if let Some(c) = cache {
                    if let Err(e) = c.put(&key, &raw) {
                        log::warn!("response cache write failed: {e}");
                    }
                }
                return Ok(d);
            }
            Err(e) => last_err = e,
        }
    }
    Err(SegmentationError::UnparseableResponse(last_err))
}

/// LLM decomposition when a client is given, else (or on failure) the rule
/// segmenter; the event source tag records which path produced the result.
pub fn decompose(
    prompt: &CaptionRecord,
    strategy: Strategy,
    llm: Option<&dyn LlmClient>,
    cache: Option<&ResponseCache>,
) -> Decomposition {
    if let Some(client) = llm {
        match decompose_llm(prompt, strategy, client, cache) {
            Ok(d) => return d,
            Err(e) => log::warn!("falling back to rule segmenter for {:?}: {e}", prompt.text),
        }
    }
    decompose_rule_with(prompt, strategy)
}
