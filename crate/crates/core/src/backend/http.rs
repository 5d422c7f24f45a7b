use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{BackendError, ChatBackend, ChatRequest, ModelRole};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(6)))
    }
}

/// Client for OpenAI-compatible `POST {base_url}/chat/completions`.
pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::Client,
}

impl OpenAiBackend {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(OpenAiBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            retry,
            client,
        })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }

    fn body(request: &ChatRequest) -> Value {
        json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        })
    }

    async fn attempt(&self, body: &Value) -> Result<String, BackendError> {
        let mut req = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(map_reqwest)?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(BackendError::HttpStatus {
                status: status.as_u16(),
                body,
            });
        }
        let v: Value = resp.json().await.map_err(map_reqwest)?;
        match v.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(s) => Ok(s.to_string()),
            None => Err(BackendError::EmptyResponse),
        }
    }
}

fn map_reqwest(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Transport(_) | BackendError::Timeout => true,
        BackendError::HttpStatus { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    fn endpoint(&self) -> String {
        self.base_url.clone()
    }

    async fn complete(&self, role: ModelRole, request: &ChatRequest) -> Result<String, BackendError> {
        let body = Self::body(request);
        let mut attempt = 0;
        loop {
            match self.attempt(&body).await {
                Ok(text) => return Ok(text),
                Err(e) if retryable(&e) && attempt < self.retry.max_retries => {
                    warn!(%role, attempt, error = %e, "retrying chat completion");
                    tokio::time::sleep(self.retry.delay(attempt)).await;
                    attempt += 1;
                }
                Err(e) => {
                    debug!(%role, attempt, error = %e, "chat completion failed");
                    return Err(e);
                }
            }
        }
    }
}
