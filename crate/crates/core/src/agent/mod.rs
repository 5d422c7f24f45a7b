//! The per-turn decision loop, its context strategies, and episode driving.
//!
//! `u_fold` rebuilds the agent's context at every user turn from a folded
//! summary plus extracted history lines. The three other strategies are the
//! comparison baselines: the whole raw history, summarize-on-budget, and
//! rebuild-every-turn.

mod grammar;
mod prompt;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tracing::{debug, info};

use crate::backend::{estimate_tokens, BackendError, CallRecord, ChatMessage, ChatRequest, ModelRole, RoleRouter};
use crate::environment::{
    evaluate_reward, Domain, Mutation, NoiseConfig, TaskSpec, ToolInvocation, ToolRegistry, ToolSpec, UserError,
    UserSimulator, WorldState,
};
use crate::folding::{render_summarizer_prompt, FoldConfig, FoldError, FoldedContext, Folder, PromptTemplates, Summary};
use crate::transcript::log::{Clock, EpisodeEvent, EventLog, EventPayload};
use crate::transcript::{AgentAction, Cycle, EpisodeLedger, TranscriptError, PROTOCOL_REPAIR_TOOL};

pub use grammar::{
    parse_action_json, parse_agent_output, render_action_block, render_agent_output, AgentOutputError, AgentPayload,
    ParsedAgentOutput,
};
pub use prompt::{assemble, cycle_messages, observation_message, raw_turn_messages, render_agent_prompt, render_agent_system};

/// Final response used when a turn has to be closed by the runtime.
pub const FORCED_FINAL: &str =
    "I'm sorry, I ran into a problem while handling this request and could not finish it. Could you rephrase or try again?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[serde(rename = "u_fold")]
    UFold,
    FullContextReact,
    BudgetSummarize,
    PerTurnReconstruct,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::UFold,
        StrategyKind::FullContextReact,
        StrategyKind::BudgetSummarize,
        StrategyKind::PerTurnReconstruct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::UFold => "u_fold",
            StrategyKind::FullContextReact => "full_context_react",
            StrategyKind::BudgetSummarize => "budget_summarize",
            StrategyKind::PerTurnReconstruct => "per_turn_reconstruct",
        }
    }

    pub fn parse(s: &str) -> Option<StrategyKind> {
        StrategyKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub strategy: StrategyKind,
    pub max_cycles_per_turn: u32,
    pub max_turns: u32,
    pub fold_config: FoldConfig,
    pub budget_tokens: usize,
    pub repair_retries: u32,
    /// Largest agent prompt, in estimated tokens.
    pub context_window: usize,
    pub max_output_tokens: u32,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            strategy: StrategyKind::UFold,
            max_cycles_per_turn: 20,
            max_turns: 30,
            fold_config: FoldConfig::default(),
            budget_tokens: 8192,
            repair_retries: 2,
            context_window: 32768,
            max_output_tokens: 2048,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_cycles_per_turn == 0 {
            return Err("max_cycles_per_turn must be at least 1".into());
        }
        if self.max_turns == 0 {
            return Err("max_turns must be at least 1".into());
        }
        if self.strategy == StrategyKind::BudgetSummarize && self.budget_tokens == 0 {
            return Err("budget_tokens must be positive for budget_summarize".into());
        }
        if self.context_window == 0 || self.max_output_tokens == 0 {
            return Err("context_window and max_output_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Fold(#[from] FoldError),
    #[error("agent prompt of {estimated} estimated tokens exceeds the {window}-token window")]
    ContextOverflow { estimated: usize, window: usize },
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    TurnCap,
    ScriptExhausted,
    ContextOverflow,
    BackendError,
    FoldError,
    TranscriptError,
}

impl FailureCause {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureCause::TurnCap => "turn_cap",
            FailureCause::ScriptExhausted => "script_exhausted",
            FailureCause::ContextOverflow => "context_overflow",
            FailureCause::BackendError => "backend_error",
            FailureCause::FoldError => "fold_error",
            FailureCause::TranscriptError => "transcript_error",
        }
    }

    /// Fatal causes stop the episode with reward 0. Hitting the turn cap or
    /// running out of script still gets the world state scored.
    pub fn is_fatal(self) -> bool {
        !matches!(self, FailureCause::TurnCap | FailureCause::ScriptExhausted)
    }

    fn of(e: &AgentError) -> FailureCause {
        match e {
            AgentError::Backend(_) => FailureCause::BackendError,
            AgentError::Fold(FoldError::Backend(_)) => FailureCause::BackendError,
            AgentError::Fold(_) => FailureCause::FoldError,
            AgentError::ContextOverflow { .. } => FailureCause::ContextOverflow,
            AgentError::Transcript(_) => FailureCause::TranscriptError,
        }
    }
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Agent-prompt estimate at the last agent call of each completed turn.
    pub turn_prompt_tokens: Vec<usize>,
    /// Agent-prompt estimate at the episode's last agent call.
    pub final_context_tokens: usize,
    pub tool_call_count: usize,
    /// Calls whose tool name and parameters equal an earlier call's.
    pub repeated_tool_call_count: usize,
    pub agent_calls: usize,
    pub repair_cycles: usize,
    pub protocol_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReport {
    pub turn_index: u32,
    pub final_text: String,
    pub prompt_tokens: usize,
    pub agent_calls: u32,
    pub protocol_failure: bool,
}

/// Mutable state of one running episode.
#[derive(Debug, Clone)]
pub struct Session {
    pub policy: String,
    pub registry: ToolRegistry,
    pub tools: Vec<ToolSpec>,
    pub noise: NoiseConfig,
    pub ledger: EpisodeLedger,
    pub world: WorldState,
    pub log: EventLog,
    pub metrics: EpisodeMetrics,
    /// Latest folded context (u_fold only).
    pub last_fold: Option<FoldedContext>,
    /// Selected-context text of the latest turn.
    pub last_context: String,
    baseline_summary: Option<Summary>,
    /// Turns folded into `baseline_summary`.
    covered_through: u32,
    seen_calls: BTreeSet<String>,
}

impl Session {
    pub fn new(domain: &Domain, world: WorldState, noise: NoiseConfig, episode_id: impl Into<String>, clock: Clock) -> Self {
        Session {
            policy: domain.policy.clone(),
            registry: domain.registry.clone(),
            tools: domain.registry.specs(),
            noise,
            ledger: EpisodeLedger::new(),
            world,
            log: EventLog::new(episode_id, clock),
            metrics: EpisodeMetrics::default(),
            last_fold: None,
            last_context: String::new(),
            baseline_summary: None,
            covered_through: 0,
            seen_calls: BTreeSet::new(),
        }
    }

    fn record_tool_call(&mut self, call: &ToolInvocation) {
        self.metrics.tool_call_count += 1;
        let key = format!("{}\u{0}{}", call.name, Value::Object(call.parameters.clone()));
        if !self.seen_calls.insert(key) {
            self.metrics.repeated_tool_call_count += 1;
        }
    }

    fn append(&mut self, turn: u32, cycle: Cycle) -> Result<(), TranscriptError> {
        self.ledger.append_cycle(turn, cycle.clone())?;
        self.log.record(turn, EventPayload::Cycle { cycle });
        Ok(())
    }

    fn push_summary(&mut self, summary: Summary) {
        self.log.record(summary.turn_index, EventPayload::Summary { summary });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub domain: String,
    pub task_id: String,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub reward: f64,
    pub failure_cause: Option<FailureCause>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_detail: Option<String>,
    pub turns: u32,
    pub metrics: EpisodeMetrics,
    pub ledger: EpisodeLedger,
    pub mutations: Vec<Mutation>,
    #[serde(skip)]
    pub events: Vec<EpisodeEvent>,
    #[serde(skip)]
    pub calls: Vec<CallRecord>,
}

impl EpisodeRecord {
    pub fn failed(&self) -> bool {
        self.failure_cause.is_some_and(FailureCause::is_fatal)
    }
}

/// Runs turns for one configuration against one router.
pub struct Agent<'a> {
    pub templates: &'a PromptTemplates,
    pub router: &'a RoleRouter,
    pub config: &'a AgentConfig,
}

impl<'a> Agent<'a> {
    pub fn new(templates: &'a PromptTemplates, router: &'a RoleRouter, config: &'a AgentConfig) -> Self {
        Agent {
            templates,
            router,
            config,
        }
    }

    fn folder(&self) -> Folder<'a> {
        Folder::new(self.templates, self.router)
    }

    /// Appends `query` as a new user turn and runs the agent until it gives
    /// a final response or the turn is force-closed.
    pub async fn run_turn(&self, s: &mut Session, query: &str) -> Result<TurnReport, AgentError> {
        let turn = s.ledger.append_user(query)?;
        s.log.record(turn, EventPayload::Utterance { text: query.to_string() });
        let (selected, history) = self.prepare_context(s, turn).await?;
        let system = render_agent_system(self.templates, &s.tools, &selected, &s.policy);
        s.last_context = selected;

        let mut agent_calls = 0u32;
        let mut repairs = 0u32;
        let mut prompt_tokens = 0usize;
        let mut forced = false;
        loop {
            if agent_calls >= self.config.max_cycles_per_turn {
                forced = true;
                break;
            }
            let current = s.ledger.trajectory(turn).map(|t| t.cycles.clone()).unwrap_or_default();
            let messages = assemble(system.clone(), history.clone(), query, &current);
            let request = ChatRequest::new(messages).with_max_output_tokens(self.config.max_output_tokens);
            let estimated = request.estimated_tokens();
            if estimated > self.config.context_window {
                return Err(AgentError::ContextOverflow {
                    estimated,
                    window: self.config.context_window,
                });
            }
            prompt_tokens = estimated;
            s.metrics.final_context_tokens = estimated;
            let raw = self.router.complete(ModelRole::Agent, request).await?;
            agent_calls += 1;
            s.metrics.agent_calls += 1;

            match parse_agent_output(&raw) {
                Ok(ParsedAgentOutput {
                    inner,
                    payload: AgentPayload::Final { text },
                    ..
                }) => {
                    s.append(turn, Cycle::finish(inner, text))?;
                    break;
                }
                Ok(ParsedAgentOutput {
                    inner,
                    payload: AgentPayload::ToolInvocation(call),
                    ..
                }) => {
                    let outcome = s.world.execute(&s.registry, &call, &s.noise);
                    if call.name != PROTOCOL_REPAIR_TOOL {
                        s.record_tool_call(&call);
                    }
                    let action = AgentAction::tool(call.name, call.parameters);
                    s.append(turn, Cycle::tool(inner, action, outcome.observation))?;
                }
                Err(e) => {
                    if repairs >= self.config.repair_retries {
                        debug!(turn, error = %e, "repair budget exhausted");
                        forced = true;
                        break;
                    }
                    repairs += 1;
                    s.metrics.repair_cycles += 1;
                    let mut params = Map::new();
                    params.insert("raw".into(), Value::String(raw));
                    let action = AgentAction::tool(PROTOCOL_REPAIR_TOOL, params);
                    s.append(turn, Cycle::tool("", action, repair_note(&e)))?;
                }
            }
        }
        if forced {
            s.append(turn, Cycle::finish("", FORCED_FINAL))?;
            s.ledger.mark_protocol_failure(turn);
            s.log.record(turn, EventPayload::ProtocolFailure);
            s.metrics.protocol_failures += 1;
        }
        s.metrics.turn_prompt_tokens.push(prompt_tokens);
        let final_text = s
            .ledger
            .trajectory(turn)
            .and_then(|t| t.final_text())
            .unwrap_or_default()
            .to_string();
        Ok(TurnReport {
            turn_index: turn,
            final_text,
            prompt_tokens,
            agent_calls,
            protocol_failure: forced,
        })
    }

    /// Selected-context text and prior-turn messages for the turn's prompt.
    async fn prepare_context(&self, s: &mut Session, turn: u32) -> Result<(String, Vec<ChatMessage>), AgentError> {
        match self.config.strategy {
            StrategyKind::UFold => {
                let folded = self.folder().fold(&mut s.ledger, &s.tools, &self.config.fold_config).await?;
                s.push_summary(folded.summary.clone());
                s.log.record(turn, EventPayload::Fold { folded: folded.clone() });
                let selected = folded.render_selected_context();
                s.last_fold = Some(folded);
                Ok((selected, Vec::new()))
            }
            StrategyKind::FullContextReact => Ok((String::new(), raw_turn_messages(&s.ledger, 1, turn - 1))),
            StrategyKind::BudgetSummarize => {
                let raw = s.ledger.render_raw_turns(s.covered_through + 1, turn - 1);
                if turn > 1 && estimate_tokens(&raw) > self.config.budget_tokens {
                    self.rebuild(s, turn, &raw).await?;
                    s.covered_through = turn - 1;
                }
                let history = raw_turn_messages(&s.ledger, s.covered_through + 1, turn - 1);
                Ok((baseline_context(s.baseline_summary.as_ref()), history))
            }
            StrategyKind::PerTurnReconstruct => {
                if turn > 1 {
                    let raw = s.ledger.render_raw_turns(turn - 1, turn - 1);
                    self.rebuild(s, turn, &raw).await?;
                    s.covered_through = turn - 1;
                }
                Ok((baseline_context(s.baseline_summary.as_ref()), Vec::new()))
            }
        }
    }

    /// One summarizer call over the previous workspace plus `raw`.
    async fn rebuild(&self, s: &mut Session, turn: u32, raw: &str) -> Result<(), AgentError> {
        let prompt = render_summarizer_prompt(self.templates, s.baseline_summary.as_ref(), raw);
        let summary = self.folder().summarize_prompt(prompt, turn).await?;
        s.ledger.push_summary(summary.clone());
        s.push_summary(summary.clone());
        s.baseline_summary = Some(summary);
        Ok(())
    }

    /// Drives a task to completion: the user simulator and the agent
    /// alternate until the sentinel, the turn cap, or a fatal error.
    pub async fn run_episode(
        &self,
        domain: &Domain,
        task: &TaskSpec,
        seed: u64,
        noise: NoiseConfig,
        episode_id: &str,
        clock: Clock,
    ) -> EpisodeRecord {
        let mut s = Session::new(domain, domain.world_for(task), noise, episode_id, clock);
        let mut user = UserSimulator::new(&task.user_scenario, &task.termination_sentinel, seed);
        let mut failure: Option<(FailureCause, String)> = None;
        let mut turns = 0u32;
        loop {
            if turns >= self.config.max_turns {
                failure = Some((FailureCause::TurnCap, format!("stopped after {turns} turns")));
                break;
            }
            let reply = match user.respond(&s.ledger, self.router).await {
                Ok(r) => r,
                Err(UserError::ScriptExhausted) => {
                    failure = Some((FailureCause::ScriptExhausted, UserError::ScriptExhausted.to_string()));
                    break;
                }
                Err(UserError::Backend(e)) => {
                    failure = Some((FailureCause::BackendError, e.to_string()));
                    break;
                }
            };
            if reply.done {
                // the closing utterance is kept; no agent turn follows it
                let turn = s.ledger.current_turn() + 1;
                if s.ledger.append_user(reply.text.clone()).is_ok() {
                    s.log.record(turn, EventPayload::Utterance { text: reply.text });
                }
                break;
            }
            match self.run_turn(&mut s, &reply.text).await {
                Ok(_) => turns += 1,
                Err(e) => {
                    failure = Some((FailureCause::of(&e), e.to_string()));
                    break;
                }
            }
        }
        s.ledger.terminate();
        let reward = match &failure {
            Some((cause, _)) if cause.is_fatal() => 0.0,
            _ => evaluate_reward(task, &s.world),
        };
        s.log.record(
            s.ledger.current_turn(),
            EventPayload::End {
                reward: Some(reward),
                failure_cause: failure.as_ref().map(|(c, _)| c.as_str().to_string()),
            },
        );
        info!(episode_id, reward, turns, "episode finished");
        EpisodeRecord {
            episode_id: episode_id.to_string(),
            domain: domain.name.clone(),
            task_id: task.task_id.clone(),
            strategy: self.config.strategy,
            seed,
            reward,
            failure_cause: failure.as_ref().map(|(c, _)| *c),
            failure_detail: failure.map(|(_, d)| d),
            turns,
            metrics: s.metrics,
            ledger: s.ledger,
            mutations: s.world.mutation_log,
            events: s.log.into_events(),
            calls: self.router.calls(),
        }
    }
}

fn baseline_context(summary: Option<&Summary>) -> String {
    summary.map_or_else(String::new, |s| format!("Conversation summary:\n{}", s.render()))
}

fn repair_note(e: &AgentOutputError) -> String {
    format!(
        "Format error: {e}. Reply with a thought block wrapped by <inner> and </inner>, followed by exactly one \
         <action> block holding a JSON document with \"action\" and \"parameters\", or exactly one <final> block."
    )
}

#[cfg(test)]
pub(crate) mod tests;
