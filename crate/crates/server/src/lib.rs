//! HTTP/JSON service over the harness: suite runs, reports, interactive
//! sessions, log replay and parsing utilities.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ctxfold_core::agent::{parse_agent_output, AgentError, AgentPayload};
use ctxfold_core::api::*;
use ctxfold_core::backend::build_router;
use ctxfold_core::environment::Domain;
use ctxfold_core::harness::{
    compute_winrate_bins, config_router_factory, export_report, replay_log, report_from_dir, resolve_domain,
    run_suite_with, ChatOutput, ChatSession, ExportFormat, HarnessError, Progress,
};
use tokio::net::TcpListener;
use tokio::sync::Mutex;
use tracing::{info, warn};

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        let status = match kind {
            ErrorKind::Config => StatusCode::BAD_REQUEST,
            ErrorKind::Invalid => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            body: ErrorBody {
                kind,
                message: message.into(),
            },
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        ApiError::new(ErrorKind::NotFound, format!("no {what} {id}"))
    }
}

impl From<HarnessError> for ApiError {
    fn from(e: HarnessError) -> Self {
        let kind = match &e {
            e if e.is_config() => ErrorKind::Config,
            HarnessError::GridMismatch(_) | HarnessError::Json(_) | HarnessError::Log(_) | HarnessError::Csv(_) => {
                ErrorKind::Invalid
            }
            _ => ErrorKind::Internal,
        };
        ApiError::new(kind, e.to_string())
    }
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        ApiError::new(ErrorKind::Internal, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

struct RunEntry {
    progress: Arc<Progress>,
    status: Mutex<RunStatus>,
}

#[derive(Clone, Default)]
pub struct AppState {
    runs: Arc<Mutex<HashMap<String, Arc<RunEntry>>>>,
    sessions: Arc<Mutex<HashMap<String, Arc<Mutex<ChatSession>>>>>,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}-{}", self.next_id.fetch_add(1, Ordering::SeqCst) + 1)
    }
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/domains", get(domains))
        .route("/v1/runs", post(start_run))
        .route("/v1/runs/{id}", get(run_status))
        .route("/v1/report", post(report))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", axum::routing::delete(close_session))
        .route("/v1/sessions/{id}/input", post(session_input))
        .route("/v1/sessions/{id}/context", get(session_context))
        .route("/v1/replay", post(replay))
        .route("/v1/ops/parse_agent_output", post(parse_output))
        .route("/v1/ops/winrate", post(winrate))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app(state)).await
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn domains() -> ApiResult<Vec<DomainInfo>> {
    let mut out = Vec::new();
    for name in Domain::BUILTIN {
        let d = Domain::builtin(name).map_err(HarnessError::from)?;
        out.push(DomainInfo {
            name: d.name.clone(),
            tools: d.registry.specs().into_iter().map(|s| s.name).collect(),
            tasks: d.tasks.iter().map(|t| t.task_id.clone()).collect(),
        });
    }
    Ok(Json(out))
}

async fn start_run(State(state): State<AppState>, Json(req): Json<RunRequest>) -> ApiResult<RunCreated> {
    let config = req.config;
    config.validate()?;
    let total = config.strategies().len() * config.select_tasks()?.len() * config.seeds().len();
    let run_id = state.fresh_id("run");
    let entry = Arc::new(RunEntry {
        progress: Arc::new(Progress::default()),
        status: Mutex::new(RunStatus {
            run_id: run_id.clone(),
            state: RunState::Running,
            total,
            done: 0,
            error: None,
            failed_episodes: Vec::new(),
            report: None,
        }),
    });
    state.runs.lock().await.insert(run_id.clone(), entry.clone());
    info!(%run_id, total, "run started");
    tokio::spawn(async move {
        let routers = config_router_factory(&config);
        let result = run_suite_with(&config, routers, Some(entry.progress.clone())).await;
        let mut status = entry.status.lock().await;
        status.done = entry.progress.done.load(Ordering::SeqCst);
        match result {
            Ok(out) => {
                status.state = RunState::Completed;
                status.failed_episodes = out
                    .records
                    .iter()
                    .filter(|r| r.failed())
                    .map(|r| r.episode_id.clone())
                    .collect();
                status.report = Some(out.report);
            }
            Err(e) => {
                warn!(run_id = %status.run_id, error = %e, "run failed");
                status.state = RunState::Failed;
                status.error = Some(e.to_string());
            }
        }
    });
    Ok(Json(RunCreated { run_id, total }))
}

async fn run_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<RunStatus> {
    let entry = state.runs.lock().await.get(&id).cloned().ok_or_else(|| ApiError::not_found("run", &id))?;
    let mut status = entry.status.lock().await.clone();
    if status.state == RunState::Running {
        status.done = entry.progress.done.load(Ordering::SeqCst);
    }
    Ok(Json(status))
}

async fn report(Json(req): Json<ReportRequest>) -> ApiResult<ReportResponse> {
    let out = tokio::task::spawn_blocking(move || -> Result<ReportResponse, HarnessError> {
        let report = report_from_dir(&req.input, req.bin_width)?;
        let files = match &req.out_dir {
            Some(dir) => export_report(&report, dir, req.format.unwrap_or(ExportFormat::Csv))?,
            None => Vec::new(),
        };
        Ok(ReportResponse { report, files })
    })
    .await
    .map_err(|e| ApiError::new(ErrorKind::Internal, e.to_string()))??;
    Ok(Json(out))
}

async fn create_session(State(state): State<AppState>, Json(req): Json<SessionCreate>) -> ApiResult<SessionCreated> {
    let domain = resolve_domain(&req.domain)?;
    let task = match &req.task_id {
        Some(id) => Some(
            domain
                .task(id)
                .cloned()
                .ok_or_else(|| ApiError::new(ErrorKind::Config, format!("unknown task id {id}")))?,
        ),
        None => None,
    };
    let mut agent = req.config.effective_agent()?;
    if let Some(s) = req.strategy {
        agent.strategy = s;
    }
    agent.validate().map_err(|e| ApiError::new(ErrorKind::Config, e))?;
    let router = build_router(&req.config.role_backends(), agent.max_output_tokens)
        .map_err(|e| ApiError::new(ErrorKind::Config, e.to_string()))?;
    let templates = Arc::new(req.config.templates()?);
    let session_id = state.fresh_id("session");
    let chat = ChatSession::new(&domain, task, templates, router, agent, session_id.clone());
    state
        .sessions
        .lock()
        .await
        .insert(session_id.clone(), Arc::new(Mutex::new(chat)));
    info!(%session_id, domain = %domain.name, "session opened");
    Ok(Json(SessionCreated { session_id }))
}

async fn session(state: &AppState, id: &str) -> Result<Arc<Mutex<ChatSession>>, ApiError> {
    state
        .sessions
        .lock()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("session", id))
}

async fn session_input(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SessionInput>,
) -> ApiResult<ChatOutput> {
    let s = session(&state, &id).await?;
    let mut chat = s.lock().await;
    if chat.is_closed() {
        return Err(ApiError::new(ErrorKind::Invalid, format!("session {id} is closed")));
    }
    let out = chat.handle(&req.line).await?;
    if chat.is_closed() {
        state.sessions.lock().await.remove(&id);
    }
    Ok(Json(out))
}

async fn session_context(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<ChatOutput> {
    let s = session(&state, &id).await?;
    let chat = s.lock().await;
    Ok(Json(ChatOutput::Context { text: chat.context() }))
}

async fn close_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<ChatOutput> {
    let s = session(&state, &id).await?;
    state.sessions.lock().await.remove(&id);
    let mut chat = s.lock().await;
    Ok(Json(chat.quit()))
}

async fn replay(Json(req): Json<ReplayRequest>) -> ApiResult<ctxfold_core::harness::ReplaySummary> {
    Ok(Json(replay_log(&req.log)?))
}

async fn parse_output(Json(req): Json<ParseRequest>) -> ApiResult<ParsedAction> {
    let parsed = parse_agent_output(&req.text).map_err(|e| ApiError::new(ErrorKind::Invalid, e.to_string()))?;
    let mut out = ParsedAction {
        inner: parsed.inner,
        action: None,
        parameters: None,
        final_text: None,
    };
    match parsed.payload {
        AgentPayload::ToolInvocation(call) => {
            out.action = Some(call.name);
            out.parameters = Some(call.parameters);
        }
        AgentPayload::Final { text } => out.final_text = Some(text),
    }
    Ok(Json(out))
}

async fn winrate(Json(req): Json<WinrateRequest>) -> ApiResult<WinrateResponse> {
    let bins = compute_winrate_bins(&req.ufold, &req.react, req.bin_width)?;
    Ok(Json(WinrateResponse { bins }))
}

