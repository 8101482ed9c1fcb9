//! Plan-generation backends: fixture files for reproducible runs and a
//! generic chat-completion client for live models.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use fleetplan_core::prompt::{extract_instruction, instruction_line};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    Scripted,
    HttpChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    #[serde(skip)]
    pub api_key: Option<String>,
    /// Header carrying the key; sent as `Bearer <key>` when it is `Authorization`.
    pub auth_header: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub temperature: f64,
    pub fixture_dir: Option<PathBuf>,
    /// Request/response log (auth redacted), one JSON line per attempt.
    pub log_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: None,
            api_key: None,
            auth_header: "Authorization".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 250,
            temperature: 0.0,
            fixture_dir: None,
            log_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("BACKEND_TIMEOUT: no answer from {0}")]
    Timeout(String),
    #[error("BACKEND_UNREACHABLE: {0}")]
    Unreachable(String),
    #[error("NO_FIXTURE: {0}")]
    NoFixture(String),
    #[error("BACKEND_REJECTED: {0}")]
    Rejected(String),
    #[error("BACKEND_CONFIG: {0}")]
    Config(String),
}

impl BackendError {
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Timeout(_) => "BACKEND_TIMEOUT",
            BackendError::Unreachable(_) => "BACKEND_UNREACHABLE",
            BackendError::NoFixture(_) => "NO_FIXTURE",
            BackendError::Rejected(_) => "BACKEND_REJECTED",
            BackendError::Config(_) => "BACKEND_CONFIG",
        }
    }
}

impl BackendConfig {
    pub fn scripted(fixture_dir: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            fixture_dir: Some(fixture_dir.into()),
            ..Default::default()
        }
    }

    pub fn http(endpoint: &str, model: &str) -> Self {
        BackendConfig {
            kind: BackendKind::HttpChat,
            endpoint: Some(endpoint.into()),
            model_name: Some(model.into()),
            ..Default::default()
        }
    }

    /// Applies `DART_BACKEND`, `DART_ENDPOINT`, `DART_API_KEY` and `DART_MODEL`.
    pub fn with_env(mut self) -> Result<Self, BackendError> {
        self.apply_vars(|k| std::env::var(k).ok())?;
        Ok(self)
    }

    fn apply_vars(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), BackendError> {
        if let Some(b) = get("DART_BACKEND") {
            self.kind = parse_kind(&b)?;
        }
        if let Some(e) = get("DART_ENDPOINT") {
            self.endpoint = Some(e);
        }
        if let Some(k) = get("DART_API_KEY") {
            self.api_key = Some(k);
        }
        if let Some(m) = get("DART_MODEL") {
            self.model_name = Some(m);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::Scripted if self.fixture_dir.is_none() => {
                Err(BackendError::Config("scripted backend needs a fixture directory".into()))
            }
            BackendKind::HttpChat if self.endpoint.is_none() || self.model_name.is_none() => Err(
                BackendError::Config("chat backend needs an endpoint and a model name".into()),
            ),
            _ => Ok(()),
        }
    }
}

pub fn parse_kind(s: &str) -> Result<BackendKind, BackendError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "scripted" => Ok(BackendKind::Scripted),
        "http" | "http_chat" => Ok(BackendKind::HttpChat),
        other => Err(BackendError::Config(format!("unknown backend `{other}`"))),
    }
}

/// First 16 hex digits of the SHA-256 of the normalized instruction.
pub fn fixture_key(instruction: &str) -> String {
    let digest = Sha256::digest(instruction_line(instruction).as_bytes());
    hex::encode(digest)[..16].to_string()
}

/// `<key>.<trial>.txt` when present, else `<key>.txt`.
pub fn fixture_path(dir: &Path, instruction: &str, trial: u32) -> Option<PathBuf> {
    let key = fixture_key(instruction);
    [format!("{key}.{trial}.txt"), format!("{key}.txt")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
}

/// Raw model text for `prompt`. `trial` selects per-trial fixtures.
pub fn generate_plan(prompt: &str, config: &BackendConfig, trial: u32) -> Result<String, BackendError> {
    config.validate()?;
    match config.kind {
        BackendKind::Scripted => scripted(prompt, config, trial),
        BackendKind::HttpChat => chat(prompt, config),
    }
}

fn scripted(prompt: &str, config: &BackendConfig, trial: u32) -> Result<String, BackendError> {
    let dir = config.fixture_dir.as_deref().unwrap_or(Path::new("."));
    let instruction = extract_instruction(prompt)
        .ok_or_else(|| BackendError::NoFixture("prompt has no instruction line".into()))?;
    let path = fixture_path(dir, instruction, trial).ok_or_else(|| {
        BackendError::NoFixture(format!(
            "{}/{}.txt for `{instruction}`",
            dir.display(),
            fixture_key(instruction)
        ))
    })?;
    fs::read_to_string(&path).map_err(|e| BackendError::NoFixture(format!("{}: {e}", path.display())))
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

fn chat(prompt: &str, config: &BackendConfig) -> Result<String, BackendError> {
    let endpoint = config.endpoint.clone().unwrap_or_default();
    let body = json!({
        "model": config.model_name,
        "temperature": config.temperature,
        "messages": [{"role": "user", "content": prompt}],
    });
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();
    let mut last = BackendError::Unreachable(endpoint.clone());
    for attempt in 0..=config.max_retries {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(config.backoff_ms << (attempt - 1).min(10)));
        }
        let outcome = chat_once(&agent, &endpoint, &body, config);
        log_attempt(config, attempt, &endpoint, &body, &outcome);
        match outcome {
            Ok(text) => return Ok(text),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(e)) => last = e,
        }
    }
    Err(last)
}

fn chat_once(agent: &ureq::Agent, endpoint: &str, body: &Value, config: &BackendConfig) -> Result<String, Attempt> {
    let mut req = agent.post(endpoint);
    if let Some(key) = &config.api_key {
        let value = if config.auth_header.eq_ignore_ascii_case("authorization") {
            format!("Bearer {key}")
        } else {
            key.clone()
        };
        req = req.header(config.auth_header.as_str(), value);
    }
    let mut resp = match req.send_json(body) {
        Ok(r) => r,
        Err(ureq::Error::Timeout(_)) => return Err(Attempt::Retry(BackendError::Timeout(endpoint.into()))),
        Err(e) => return Err(Attempt::Retry(BackendError::Unreachable(format!("{endpoint}: {e}")))),
    };
    let status = resp.status().as_u16();
    if status == 429 || status >= 500 {
        return Err(Attempt::Retry(BackendError::Unreachable(format!("{endpoint}: HTTP {status}"))));
    }
    if status >= 400 {
        return Err(Attempt::Fatal(BackendError::Rejected(format!("{endpoint}: HTTP {status}"))));
    }
    let v: Value = resp
        .body_mut()
        .read_json()
        .map_err(|e| Attempt::Fatal(BackendError::Rejected(format!("unreadable reply: {e}"))))?;
    chat_text(&v).ok_or_else(|| Attempt::Fatal(BackendError::Rejected("reply has no message content".into())))
}

/// Pulls the assistant text out of a chat-completion reply.
pub fn chat_text(v: &Value) -> Option<String> {
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/message/content"))
        .or_else(|| v.pointer("/content/0/text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

fn log_attempt(config: &BackendConfig, attempt: u32, endpoint: &str, body: &Value, outcome: &Result<String, Attempt>) {
    let Some(dir) = &config.log_dir else {
        return;
    };
    let (ok, text) = match outcome {
        Ok(t) => (true, t.clone()),
        Err(Attempt::Retry(e) | Attempt::Fatal(e)) => (false, e.to_string()),
    };
    let line = json!({
        "attempt": attempt,
        "endpoint": endpoint,
        "headers": {
            config.auth_header.clone(): config.api_key.as_ref().map(|_| "[REDACTED]"),
        },
        "request": body,
        "ok": ok,
        "response": text,
    });
    if fs::create_dir_all(dir).is_err() {
        return;
    }
    if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(dir.join("backend.jsonl")) {
        let _ = writeln!(f, "{line}");
    }
}
