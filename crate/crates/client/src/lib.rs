//! Typed client for the ctxfold HTTP service.

use std::time::Duration;

use ctxfold_core::api::*;
use ctxfold_core::harness::{ChatOutput, ReplaySummary, RunConfig};
use reqwest::{Method, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{status} {}: {}", kind_str(body.kind), body.message)]
    Api { status: u16, body: ErrorBody },
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
}

fn kind_str(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::NotFound => "not_found",
        ErrorKind::Invalid => "invalid",
        ErrorKind::Internal => "internal",
    }
}

impl ClientError {
    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            ClientError::Api { body, .. } => Some(body.kind),
            ClientError::Transport(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base_url: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        Client {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{path}", self.base_url))
    }

    async fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ClientError> {
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
            kind: ErrorKind::Internal,
            message: text,
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            body,
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.send(self.request(Method::GET, path)).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.send(self.request(Method::POST, path).json(body)).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/health").await
    }

    pub async fn domains(&self) -> Result<Vec<DomainInfo>, ClientError> {
        self.get("/v1/domains").await
    }

    pub async fn start_run(&self, config: &RunConfig) -> Result<RunCreated, ClientError> {
        self.post("/v1/runs", &RunRequest { config: config.clone() }).await
    }

    pub async fn run_status(&self, run_id: &str) -> Result<RunStatus, ClientError> {
        self.get(&format!("/v1/runs/{run_id}")).await
    }

    /// Polls until the run leaves the running state; `on_progress` sees
    /// every poll.
    pub async fn wait_run(
        &self,
        run_id: &str,
        every: Duration,
        mut on_progress: impl FnMut(&RunStatus),
    ) -> Result<RunStatus, ClientError> {
        loop {
            let status = self.run_status(run_id).await?;
            on_progress(&status);
            if status.state != RunState::Running {
                return Ok(status);
            }
            tokio::time::sleep(every).await;
        }
    }

    pub async fn report(&self, req: &ReportRequest) -> Result<ReportResponse, ClientError> {
        self.post("/v1/report", req).await
    }

    pub async fn create_session(&self, req: &SessionCreate) -> Result<SessionCreated, ClientError> {
        self.post("/v1/sessions", req).await
    }

    pub async fn session_input(&self, session_id: &str, line: &str) -> Result<ChatOutput, ClientError> {
        let body = SessionInput { line: line.to_string() };
        self.post(&format!("/v1/sessions/{session_id}/input"), &body).await
    }

    pub async fn session_context(&self, session_id: &str) -> Result<ChatOutput, ClientError> {
        self.get(&format!("/v1/sessions/{session_id}/context")).await
    }

    pub async fn close_session(&self, session_id: &str) -> Result<ChatOutput, ClientError> {
        self.send(self.request(Method::DELETE, &format!("/v1/sessions/{session_id}")))
            .await
    }

    pub async fn replay(&self, log: &str) -> Result<ReplaySummary, ClientError> {
        self.post("/v1/replay", &ReplayRequest { log: log.to_string() }).await
    }

    pub async fn parse_agent_output(&self, text: &str) -> Result<ParsedAction, ClientError> {
        self.post("/v1/ops/parse_agent_output", &ParseRequest { text: text.to_string() })
            .await
    }

    pub async fn winrate(&self, req: &WinrateRequest) -> Result<WinrateResponse, ClientError> {
        self.post("/v1/ops/winrate", req).await
    }
}
