//! Chat-completion access for the four model roles.
//!
//! Every call goes through a [`RoleRouter`], which picks the backend mapped
//! to the role and appends a [`CallRecord`] to the router's call log. The log
//! doubles as the input of [`ReplayBackend`].

mod http;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{OpenAiBackend, RetryPolicy};
pub use scripted::{Condition, FnBackend, ReplayBackend, Scope, ScriptedBackend, ScriptedRule};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Agent,
    Summarizer,
    Extractor,
    UserSim,
}

impl ModelRole {
    pub const ALL: [ModelRole; 4] = [
        ModelRole::Agent,
        ModelRole::Summarizer,
        ModelRole::Extractor,
        ModelRole::UserSim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Agent => "agent",
            ModelRole::Summarizer => "summarizer",
            ModelRole::Extractor => "extractor",
            ModelRole::UserSim => "user_sim",
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub model_id: String,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        ChatRequest {
            messages,
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            model_id: String::new(),
        }
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest("negative temperature".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// All message contents joined by newlines; what scripted matchers see.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn prompt_sha256(&self) -> String {
        let canonical = serde_json::to_vec(&self.messages).unwrap_or_default();
        hex_digest(&canonical)
    }

    pub fn estimated_tokens(&self) -> usize {
        self.messages.iter().map(|m| estimate_tokens(&m.content)).sum()
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Approximate token count: `ceil(chars / 4)`. Not a tokenizer; only
/// relative growth is meaningful.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("empty response")]
    EmptyResponse,
    #[error("no scripted rule matched the {role} prompt")]
    NoMatchingRule { role: String },
    #[error("replay log exhausted for role {0}")]
    ReplayExhausted(String),
    #[error("replay prompt mismatch for role {role}: expected {expected}, got {found}")]
    ReplayMismatch {
        role: String,
        expected: String,
        found: String,
    },
    #[error("role {0} is not mapped to a backend")]
    UnmappedRole(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::Transport(_) => "transport",
            BackendError::HttpStatus { .. } => "http_status",
            BackendError::Timeout => "timeout",
            BackendError::EmptyResponse => "empty_response",
            BackendError::NoMatchingRule { .. } => "no_matching_rule",
            BackendError::ReplayExhausted(_) | BackendError::ReplayMismatch { .. } => "replay",
            BackendError::UnmappedRole(_) => "unmapped_role",
            BackendError::InvalidRequest(_) => "invalid_request",
            BackendError::Config(_) => "config",
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// Label recorded in the call log, e.g. the base URL.
    fn endpoint(&self) -> String;

    async fn complete(&self, role: ModelRole, request: &ChatRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: ModelRole,
    pub endpoint: String,
    pub prompt_sha256: String,
    pub request: ChatRequest,
    pub response: String,
}

#[derive(Clone)]
pub struct Route {
    pub backend: Arc<dyn ChatBackend>,
    pub model_id: String,
}

/// Role → backend mapping plus the call log of everything routed through it.
#[derive(Clone)]
pub struct RoleRouter {
    routes: BTreeMap<ModelRole, Route>,
    calls: Arc<Mutex<Vec<CallRecord>>>,
    max_output_tokens: u32,
}

impl RoleRouter {
    pub fn new() -> Self {
        RoleRouter {
            routes: BTreeMap::new(),
            calls: Arc::default(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    /// Same backend for every role.
    pub fn uniform(backend: Arc<dyn ChatBackend>, model_id: impl Into<String>) -> Self {
        let model_id = model_id.into();
        let mut r = RoleRouter::new();
        for role in ModelRole::ALL {
            r = r.route(role, backend.clone(), model_id.clone());
        }
        r
    }

    pub fn route(mut self, role: ModelRole, backend: Arc<dyn ChatBackend>, model_id: impl Into<String>) -> Self {
        self.routes.insert(
            role,
            Route {
                backend,
                model_id: model_id.into(),
            },
        );
        self
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn max_output_tokens(&self) -> u32 {
        self.max_output_tokens
    }

    pub fn is_mapped(&self, role: ModelRole) -> bool {
        self.routes.contains_key(&role)
    }

    pub fn endpoint_of(&self, role: ModelRole) -> Option<String> {
        self.routes.get(&role).map(|r| r.backend.endpoint())
    }

    /// A router with the same routes and a fresh, empty call log.
    pub fn fork(&self) -> Self {
        RoleRouter {
            routes: self.routes.clone(),
            calls: Arc::default(),
            max_output_tokens: self.max_output_tokens,
        }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("call log poisoned").clone()
    }

    pub fn calls_for(&self, role: ModelRole) -> Vec<CallRecord> {
        self.calls().into_iter().filter(|c| c.role == role).collect()
    }

    pub async fn complete(&self, role: ModelRole, mut request: ChatRequest) -> Result<String, BackendError> {
        let route = self
            .routes
            .get(&role)
            .ok_or_else(|| BackendError::UnmappedRole(role.to_string()))?;
        request.model_id = route.model_id.clone();
        request.validate()?;
        let response = route.backend.complete(role, &request).await?;
        // an empty extraction is a valid "nothing relevant" answer
        if response.trim().is_empty() && role != ModelRole::Extractor {
            return Err(BackendError::EmptyResponse);
        }
        self.calls.lock().expect("call log poisoned").push(CallRecord {
            role,
            endpoint: route.backend.endpoint(),
            prompt_sha256: request.prompt_sha256(),
            request,
            response: response.clone(),
        });
        Ok(response)
    }
}

impl Default for RoleRouter {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for RoleRouter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let routes: BTreeMap<_, _> = self
            .routes
            .iter()
            .map(|(k, v)| (k.as_str(), (v.backend.endpoint(), v.model_id.clone())))
            .collect();
        f.debug_struct("RoleRouter").field("routes", &routes).finish()
    }
}

pub fn write_calls_jsonl(calls: &[CallRecord], mut w: impl std::io::Write) -> std::io::Result<()> {
    for c in calls {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_calls_jsonl(text: &str) -> Result<Vec<CallRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Configuration for one role's backend, as it appears in run config files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<ScriptedRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_log: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_base_delay_ms: Option<u64>,
    /// Overrides the endpoint label of scripted backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Openai,
    Scripted,
    Replay,
}

impl BackendSpec {
    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, BackendError> {
        match self.kind {
            BackendKind::Openai => {
                let base_url = self
                    .base_url
                    .clone()
                    .ok_or_else(|| BackendError::Config("openai backend needs base_url".into()))?;
                let api_key = match &self.api_key_env {
                    Some(var) => Some(
                        std::env::var(var)
                            .map_err(|_| BackendError::Config(format!("environment variable {var} is not set")))?,
                    ),
                    None => None,
                };
                let mut retry = RetryPolicy::default();
                if let Some(n) = self.max_retries {
                    retry.max_retries = n;
                }
                if let Some(ms) = self.retry_base_delay_ms {
                    retry.base_delay_ms = ms;
                }
                let timeout = std::time::Duration::from_secs(self.timeout_secs.unwrap_or(120));
                Ok(Arc::new(OpenAiBackend::new(base_url, api_key, retry, timeout)?))
            }
            BackendKind::Scripted => {
                let mut b = ScriptedBackend::new(self.rules.clone())?;
                if let Some(label) = &self.label {
                    b = b.with_label(label.clone());
                }
                Ok(Arc::new(b))
            }
            BackendKind::Replay => {
                let path = self
                    .replay_log
                    .as_ref()
                    .ok_or_else(|| BackendError::Config("replay backend needs replay_log".into()))?;
                let text = std::fs::read_to_string(path)
                    .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
                let calls = read_calls_jsonl(&text).map_err(|e| BackendError::Config(e.to_string()))?;
                Ok(Arc::new(ReplayBackend::new(calls)))
            }
        }
    }
}

/// Builds a fresh router (fresh scripted state, empty call log) from
/// per-role specs.
pub fn build_router(specs: &BTreeMap<ModelRole, BackendSpec>, max_output_tokens: u32) -> Result<RoleRouter, BackendError> {
    let mut router = RoleRouter::new().with_max_output_tokens(max_output_tokens);
    for role in ModelRole::ALL {
        let spec = specs
            .get(&role)
            .ok_or_else(|| BackendError::UnmappedRole(role.to_string()))?;
        router = router.route(role, spec.build()?, spec.model.clone());
    }
    Ok(router)
}
