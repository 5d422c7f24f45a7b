//! Suite runner, reporting, and the interactive chat session.

mod chat;
mod replay;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use tracing::{info, warn};

use crate::agent::{Agent, AgentConfig, EpisodeMetrics, EpisodeRecord, FailureCause, StrategyKind};
use crate::backend::{build_router, write_calls_jsonl, BackendError, BackendSpec, ModelRole, RoleRouter};
use crate::environment::{Domain, DomainError, NoiseConfig, TaskSpec};
use crate::folding::{PromptTemplates, TemplateError};
use crate::transcript::log::{write_jsonl, Clock};
use crate::transcript::EpisodeLedger;

pub use chat::{ChatOutput, ChatSession, CMD_CONTEXT, CMD_QUIT};
pub use replay::{replay_log, ReplayedEpisode, ReplaySummary, RoleCallStats};
pub use report::{
    aggregate, check_histogram_conservation, compute_winrate_bins, export_report, import_report, rebin, AggregateReport,
    AvgRow, DomainAvgRow, EpisodeSummary, ExportFormat, FailureRow, GrowthRow, HistogramRow, ReportMeta, WinrateBin,
    DEFAULT_BIN_WIDTH,
};

pub const ABLATION_NO_EXTRACTION: &str = "w/o Context Extraction";
pub const ABLATION_NO_SUMMARIZATION: &str = "w/o Conversation Summarization";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("record sets cover different task grids: {0}")]
    GridMismatch(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("log: {0}")]
    Log(String),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::Domain(_) | HarnessError::Template(_)
        )
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSelection {
    /// Built-in domain names.
    pub domains: Vec<String>,
    /// Extra domain files.
    pub paths: Vec<PathBuf>,
    /// Restrict to these task ids; all tasks when empty.
    pub task_ids: Vec<String>,
    /// Keep only tasks with a scripted user.
    pub scripted_only: bool,
    pub limit: Option<usize>,
}

impl Default for TaskSelection {
    fn default() -> Self {
        TaskSelection {
            domains: vec!["retail".into()],
            paths: Vec::new(),
            task_ids: Vec::new(),
            scripted_only: false,
            limit: None,
        }
    }
}

/// Routes summarizer and extractor to one endpoint and agent to another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetterFolder {
    pub folder: BackendSpec,
    pub agent: BackendSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backends: BTreeMap<ModelRole, BackendSpec>,
    pub better_folder: Option<BetterFolder>,
    pub agent: AgentConfig,
    /// Strategies to run; the agent's own strategy when empty.
    pub strategies: Vec<StrategyKind>,
    pub ablation: Option<String>,
    pub noise: NoiseConfig,
    pub tasks: TaskSelection,
    pub k: u32,
    /// One seed per run; `seed_base..seed_base+k` when empty.
    pub seeds: Vec<u64>,
    pub seed_base: u64,
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
    pub clock: Clock,
    pub templates_dir: Option<PathBuf>,
    pub bin_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backends: BTreeMap::new(),
            better_folder: None,
            agent: AgentConfig::default(),
            strategies: Vec::new(),
            ablation: None,
            noise: NoiseConfig::default(),
            tasks: TaskSelection::default(),
            k: 1,
            seeds: Vec::new(),
            seed_base: 0,
            workers: 4,
            output_dir: None,
            clock: Clock::Wall,
            templates_dir: None,
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.k as u64).map(|i| self.seed_base + i).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn strategies(&self) -> Vec<StrategyKind> {
        if self.strategies.is_empty() {
            vec![self.agent.strategy]
        } else {
            self.strategies.clone()
        }
    }

    /// Per-role backend specs after applying the better_folder preset.
    pub fn role_backends(&self) -> BTreeMap<ModelRole, BackendSpec> {
        let mut specs = self.backends.clone();
        if let Some(bf) = &self.better_folder {
            specs.insert(ModelRole::Summarizer, bf.folder.clone());
            specs.insert(ModelRole::Extractor, bf.folder.clone());
            specs.insert(ModelRole::Agent, bf.agent.clone());
            specs.entry(ModelRole::UserSim).or_insert_with(|| bf.agent.clone());
        }
        specs
    }

    /// Agent config with the ablation preset applied.
    pub fn effective_agent(&self) -> Result<AgentConfig, HarnessError> {
        let mut agent = self.agent.clone();
        if let Some(name) = &self.ablation {
            apply_ablation(&mut agent, name)?;
        }
        Ok(agent)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.validate_without_backends()?;
        let specs = self.role_backends();
        for role in ModelRole::ALL {
            if !specs.contains_key(&role) {
                return Err(HarnessError::Config(format!("no backend configured for role {role}")));
            }
        }
        // catches bad scripted rules and missing api keys before any episode runs
        build_router(&specs, self.agent.max_output_tokens).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn templates(&self) -> Result<PromptTemplates, HarnessError> {
        match &self.templates_dir {
            Some(dir) => Ok(PromptTemplates::load_dir(dir)?),
            None => Ok(PromptTemplates::builtin()),
        }
    }

    /// Selected (domain, task) pairs in config order.
    pub fn select_tasks(&self) -> Result<Vec<(Arc<Domain>, TaskSpec)>, HarnessError> {
        let mut domains = Vec::new();
        for name in &self.tasks.domains {
            domains.push(Arc::new(Domain::builtin(name)?));
        }
        for path in &self.tasks.paths {
            domains.push(Arc::new(Domain::load(path)?));
        }
        let mut out = Vec::new();
        for d in &domains {
            for t in &d.tasks {
                if !self.tasks.task_ids.is_empty() && !self.tasks.task_ids.contains(&t.task_id) {
                    continue;
                }
                if self.tasks.scripted_only
                    && !matches!(t.user_scenario, crate::environment::UserScenario::Scripted { .. })
                {
                    continue;
                }
                out.push((d.clone(), t.clone()));
            }
        }
        for id in &self.tasks.task_ids {
            if !out.iter().any(|(_, t)| &t.task_id == id) {
                return Err(HarnessError::Config(format!("unknown task id {id}")));
            }
        }
        if let Some(n) = self.tasks.limit {
            out.truncate(n);
        }
        Ok(out)
    }
}

pub fn apply_ablation(agent: &mut AgentConfig, name: &str) -> Result<(), HarnessError> {
    match name {
        ABLATION_NO_EXTRACTION => agent.fold_config.extract_enabled = false,
        ABLATION_NO_SUMMARIZATION => agent.fold_config.summarize_enabled = false,
        other => {
            return Err(HarnessError::Config(format!(
                "unknown ablation {other:?}; expected {ABLATION_NO_EXTRACTION:?} or {ABLATION_NO_SUMMARIZATION:?}"
            )))
        }
    }
    Ok(())
}

/// Makes a fresh router per episode, so scripted rule budgets and call logs
/// never leak between episodes.
pub type RouterFactory = Arc<dyn Fn() -> Result<RoleRouter, BackendError> + Send + Sync>;

pub fn config_router_factory(config: &RunConfig) -> RouterFactory {
    let specs = config.role_backends();
    let max = config.agent.max_output_tokens;
    Arc::new(move || build_router(&specs, max))
}

pub fn episode_id(domain: &str, task_id: &str, strategy: StrategyKind, seed: u64) -> String {
    format!("{domain}__{task_id}__{strategy}__s{seed}")
}

/// Completed-episode counter shared with observers.
#[derive(Debug, Default)]
pub struct Progress {
    pub total: AtomicUsize,
    pub done: AtomicUsize,
}

pub struct SuiteOutput {
    pub records: Vec<EpisodeRecord>,
    pub report: AggregateReport,
}

/// Runs every selected task `k` times per strategy and aggregates.
pub async fn run_suite(config: &RunConfig) -> Result<SuiteOutput, HarnessError> {
    run_suite_with(config, config_router_factory(config), None).await
}

pub async fn run_suite_with(
    config: &RunConfig,
    routers: RouterFactory,
    progress: Option<Arc<Progress>>,
) -> Result<SuiteOutput, HarnessError> {
    config.validate_without_backends()?;
    let agent_base = config.effective_agent()?;
    let templates = Arc::new(config.templates()?);
    let tasks = config.select_tasks()?;
    let seeds = config.seeds();
    let strategies = config.strategies();
    if let Some(dir) = &config.output_dir {
        for sub in ["episodes", "events", "calls"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
    }

    let progress = progress.unwrap_or_default();
    progress
        .total
        .store(strategies.len() * tasks.len() * seeds.len(), Ordering::SeqCst);
    let sem = Arc::new(Semaphore::new(config.workers));
    let mut set = JoinSet::new();
    let mut order = Vec::new();
    for &strategy in &strategies {
        for (domain, task) in &tasks {
            for &seed in &seeds {
                let id = episode_id(&domain.name, &task.task_id, strategy, seed);
                order.push(id.clone());
                let job = Job {
                    id,
                    domain: domain.clone(),
                    task: task.clone(),
                    seed,
                    agent: AgentConfig {
                        strategy,
                        ..agent_base.clone()
                    },
                    noise: config.noise.reseeded(seed),
                    clock: config.clock,
                    templates: templates.clone(),
                    routers: routers.clone(),
                    output_dir: config.output_dir.clone(),
                };
                let sem = sem.clone();
                let progress = progress.clone();
                set.spawn(async move {
                    let _permit = sem.acquire_owned().await.expect("semaphore open");
                    let rec = job.run().await;
                    progress.done.fetch_add(1, Ordering::SeqCst);
                    rec
                });
            }
        }
    }

    let mut by_id: BTreeMap<String, EpisodeRecord> = BTreeMap::new();
    while let Some(joined) = set.join_next().await {
        match joined {
            Ok(Ok(rec)) => {
                by_id.insert(rec.episode_id.clone(), rec);
            }
            Ok(Err(e)) => return Err(e),
            Err(e) => warn!(error = %e, "episode task aborted"),
        }
    }
    let records: Vec<EpisodeRecord> = order.iter().filter_map(|id| by_id.remove(id)).collect();
    let report = aggregate(&records, config.report_meta(&agent_base), config.bin_width);
    if let Some(dir) = &config.output_dir {
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").map_err(io_err(&p))?;
    }
    info!(episodes = records.len(), "suite finished");
    Ok(SuiteOutput { records, report })
}

impl RunConfig {
    fn validate_without_backends(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.k as usize {
            return bad(format!("{} seeds given for k = {}", self.seeds.len(), self.k));
        }
        if self.workers == 0 || self.bin_width == 0 {
            return bad("workers and bin_width must be positive".into());
        }
        self.agent.validate().map_err(HarnessError::Config)?;
        self.effective_agent().map(|_| ())
    }

    pub fn report_meta(&self, agent: &AgentConfig) -> ReportMeta {
        ReportMeta {
            strategies: self.strategies(),
            ablation: self.ablation.clone(),
            k: self.k,
            seeds: self.seeds(),
            noise: self.noise,
            max_cycles_per_turn: agent.max_cycles_per_turn,
            max_turns: agent.max_turns,
            max_output_tokens: agent.max_output_tokens,
            context_window: agent.context_window,
            token_estimator: "ceil(chars / 4)".into(),
            bin_width: self.bin_width,
        }
    }
}

struct Job {
    id: String,
    domain: Arc<Domain>,
    task: TaskSpec,
    seed: u64,
    agent: AgentConfig,
    noise: NoiseConfig,
    clock: Clock,
    templates: Arc<PromptTemplates>,
    routers: RouterFactory,
    output_dir: Option<PathBuf>,
}

impl Job {
    async fn run(self) -> Result<EpisodeRecord, HarnessError> {
        let episode_path = self.output_dir.as_ref().map(|d| d.join("episodes").join(format!("{}.json", self.id)));
        if let Some(p) = &episode_path {
            if p.exists() {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                if let Ok(mut rec) = serde_json::from_str::<EpisodeRecord>(&text) {
                    info!(episode = %self.id, "already complete, skipping");
                    let dir = self.output_dir.as_ref().expect("output dir");
                    rec.events = read_events(dir, &self.id)?;
                    return Ok(rec);
                }
            }
        }
        let rec = match (self.routers)() {
            Ok(router) => {
                Agent::new(&self.templates, &router, &self.agent)
                    .run_episode(&self.domain, &self.task, self.seed, self.noise, &self.id, self.clock)
                    .await
            }
            Err(e) => self.failed_before_start(e),
        };
        if let Some(dir) = &self.output_dir {
            write_episode(dir, &rec)?;
        }
        Ok(rec)
    }

    fn failed_before_start(&self, e: BackendError) -> EpisodeRecord {
        EpisodeRecord {
            episode_id: self.id.clone(),
            domain: self.domain.name.clone(),
            task_id: self.task.task_id.clone(),
            strategy: self.agent.strategy,
            seed: self.seed,
            reward: 0.0,
            failure_cause: Some(FailureCause::BackendError),
            failure_detail: Some(e.to_string()),
            turns: 0,
            metrics: EpisodeMetrics::default(),
            ledger: EpisodeLedger::new(),
            mutations: Vec::new(),
            events: Vec::new(),
            calls: Vec::new(),
        }
    }
}

/// Writes the episode record last, so its presence marks completion.
fn write_episode(dir: &Path, rec: &EpisodeRecord) -> Result<(), HarnessError> {
    let events = dir.join("events").join(format!("{}.jsonl", rec.episode_id));
    let mut buf = Vec::new();
    write_jsonl(&rec.events, &mut buf).map_err(io_err(&events))?;
    std::fs::write(&events, buf).map_err(io_err(&events))?;
    let calls = dir.join("calls").join(format!("{}.jsonl", rec.episode_id));
    let mut buf = Vec::new();
    write_calls_jsonl(&rec.calls, &mut buf).map_err(io_err(&calls))?;
    std::fs::write(&calls, buf).map_err(io_err(&calls))?;
    let p = dir.join("episodes").join(format!("{}.json", rec.episode_id));
    std::fs::write(&p, serde_json::to_string_pretty(rec)? + "\n").map_err(io_err(&p))?;
    Ok(())
}

fn read_events(dir: &Path, id: &str) -> Result<Vec<crate::transcript::log::EpisodeEvent>, HarnessError> {
    let p = dir.join("events").join(format!("{id}.jsonl"));
    match std::fs::File::open(&p) {
        Ok(f) => crate::transcript::log::read_jsonl(std::io::BufReader::new(f))
            .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display()))),
        Err(_) => Ok(Vec::new()),
    }
}

/// Reads every episode record under `dir/episodes`, sorted by id.
pub fn load_episodes(dir: &Path) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let ep_dir = dir.join("episodes");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&ep_dir)
        .map_err(io_err(&ep_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

/// A built-in domain name, or else a path to a domain file.
pub fn resolve_domain(name_or_path: &str) -> Result<Domain, HarnessError> {
    if Domain::BUILTIN.contains(&name_or_path) {
        return Ok(Domain::builtin(name_or_path)?);
    }
    let path = Path::new(name_or_path);
    if path.exists() {
        return Ok(Domain::load(path)?);
    }
    Err(HarnessError::Config(format!(
        "unknown domain {name_or_path:?}; built-in domains are {}",
        Domain::BUILTIN.join(", ")
    )))
}

/// Report for a run output directory (episode records) or an exported
/// report directory (meta.json plus tables). `bin_width` overrides the
/// stored one.
pub fn report_from_dir(dir: &Path, bin_width: Option<usize>) -> Result<AggregateReport, HarnessError> {
    if bin_width == Some(0) {
        return Err(HarnessError::Config("bin_width must be positive".into()));
    }
    if dir.join("episodes").is_dir() {
        let records = load_episodes(dir)?;
        let stored = dir.join("report.json");
        let meta = match std::fs::read_to_string(&stored) {
            Ok(text) => serde_json::from_str::<AggregateReport>(&text)?.meta,
            Err(_) => RunConfig::default().report_meta(&AgentConfig::default()),
        };
        let width = bin_width.unwrap_or(meta.bin_width);
        let mut meta = meta;
        meta.bin_width = width;
        return Ok(aggregate(&records, meta, width));
    }
    if dir.join("meta.json").is_file() {
        let format = if dir.join("episodes.jsonl").is_file() {
            ExportFormat::Jsonl
        } else {
            ExportFormat::Csv
        };
        let report = import_report(dir, format)?;
        return Ok(match bin_width {
            Some(w) => rebin(&report, w),
            None => report,
        });
    }
    Err(HarnessError::Config(format!(
        "{} holds neither episodes/ nor meta.json",
        dir.display()
    )))
}
