//! Complete, append-only interaction history for one episode and the
//! deterministic text views derived from it.
//!
//! Two renderings matter downstream:
//!
//! * the *dialogue view*: user queries plus the agent's thoughts and actions,
//!   with tool observations left out. The summarizer reads this.
//! * the *line-indexed view*: every thought, action and observation of the
//!   finished turns, numbered by physical line. The extractor cites ranges of
//!   it and the runtime resolves those ranges back to text.

mod history;
pub mod log;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::folding::Summary;

pub use history::{contains_verbatim, resolve_lines, LineIndexedHistory, LineRange, SpanField, SpanKey};

/// Tool name reserved for cycles that carry a malformed agent output and the
/// corrective observation sent back for it.
pub const PROTOCOL_REPAIR_TOOL: &str = "__protocol_error__";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("episode already terminated")]
    EpisodeTerminated,
    #[error("turn {0} is already closed")]
    TurnAlreadyClosed(u32),
    #[error("turn {0} is not open")]
    TurnNotOpen(u32),
    #[error("turn {0} is still open; close it before the next user utterance")]
    TurnStillOpen(u32),
    #[error("observation presence does not match action kind")]
    ObservationMismatch,
    #[error("invalid cycle: {0}")]
    InvalidCycle(String),
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("line range {start}-{end} out of bounds for history with {len} lines")]
    RangeOutOfBounds { start: usize, end: usize, len: usize },
    #[error("invalid line range {start}-{end}")]
    InvalidRange { start: usize, end: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub turn_index: u32,
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentAction {
    ToolCall {
        tool_name: String,
        parameters: Map<String, Value>,
    },
    FinalResponse {
        response_text: String,
    },
}

impl AgentAction {
    pub fn tool(name: impl Into<String>, parameters: Map<String, Value>) -> Self {
        AgentAction::ToolCall {
            tool_name: name.into(),
            parameters,
        }
    }

    pub fn final_response(text: impl Into<String>) -> Self {
        AgentAction::FinalResponse {
            response_text: text.into(),
        }
    }

    pub fn is_final(&self) -> bool {
        matches!(self, AgentAction::FinalResponse { .. })
    }

    /// True for real tool invocations, false for finals and protocol repairs.
    pub fn is_tool_invocation(&self) -> bool {
        matches!(self, AgentAction::ToolCall { tool_name, .. } if tool_name != PROTOCOL_REPAIR_TOOL)
    }

    /// Canonical one-line JSON document, identical to the body of an
    /// `<action>` block: `{"action":"name","parameters":{...}}`.
    pub fn to_action_json(&self) -> Option<String> {
        match self {
            AgentAction::ToolCall {
                tool_name,
                parameters,
            } => Some(action_json(tool_name, parameters)),
            AgentAction::FinalResponse { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), TranscriptError> {
        match self {
            AgentAction::ToolCall { tool_name, .. } if tool_name.trim().is_empty() => {
                Err(TranscriptError::InvalidCycle("tool_call requires a tool name".into()))
            }
            AgentAction::FinalResponse { response_text } if response_text.trim().is_empty() => {
                Err(TranscriptError::InvalidCycle("final_response requires text".into()))
            }
            _ => Ok(()),
        }
    }
}

pub fn action_json(tool_name: &str, parameters: &Map<String, Value>) -> String {
    let mut doc = Map::new();
    doc.insert("action".into(), Value::String(tool_name.to_string()));
    doc.insert("parameters".into(), Value::Object(parameters.clone()));
    Value::Object(doc).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub thought: String,
    pub action: AgentAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
}

impl Cycle {
    pub fn tool(thought: impl Into<String>, action: AgentAction, observation: impl Into<String>) -> Self {
        Cycle {
            thought: thought.into(),
            action,
            observation: Some(observation.into()),
        }
    }

    pub fn finish(thought: impl Into<String>, text: impl Into<String>) -> Self {
        Cycle {
            thought: thought.into(),
            action: AgentAction::final_response(text),
            observation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turn_index: u32,
    pub cycles: Vec<Cycle>,
    /// Set when the runtime had to force-close the turn.
    #[serde(default)]
    pub protocol_failure: bool,
}

impl Trajectory {
    pub fn is_closed(&self) -> bool {
        self.cycles.last().is_some_and(|c| c.action.is_final())
    }

    pub fn final_text(&self) -> Option<&str> {
        match self.cycles.last().map(|c| &c.action) {
            Some(AgentAction::FinalResponse { response_text }) => Some(response_text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLedger {
    pub utterances: Vec<Utterance>,
    pub trajectories: Vec<Trajectory>,
    pub summaries: Vec<Summary>,
    #[serde(default)]
    pub terminated: bool,
}

impl EpisodeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of user turns so far.
    pub fn current_turn(&self) -> u32 {
        self.user_utterances().count() as u32
    }

    pub fn user_utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(|u| u.speaker == Speaker::User)
    }

    pub fn user_query(&self, turn_index: u32) -> Option<&str> {
        self.user_utterances()
            .find(|u| u.turn_index == turn_index)
            .map(|u| u.text.as_str())
    }

    pub fn trajectory(&self, turn_index: u32) -> Option<&Trajectory> {
        turn_index
            .checked_sub(1)
            .and_then(|k| self.trajectories.get(k as usize))
    }

    pub fn last_summary(&self) -> Option<&Summary> {
        self.summaries.last()
    }

    pub fn is_turn_open(&self, turn_index: u32) -> bool {
        turn_index == self.current_turn()
            && turn_index > 0
            && !self.trajectory(turn_index).is_some_and(Trajectory::is_closed)
    }

    pub fn append_user(&mut self, text: impl Into<String>) -> Result<u32, TranscriptError> {
        if self.terminated {
            return Err(TranscriptError::EpisodeTerminated);
        }
        let text = text.into();
        if text.is_empty() {
            return Err(TranscriptError::EmptyUtterance);
        }
        let current = self.current_turn();
        if current > 0 && !self.trajectory(current).is_some_and(Trajectory::is_closed) {
            return Err(TranscriptError::TurnStillOpen(current));
        }
        let turn_index = current + 1;
        self.utterances.push(Utterance {
            turn_index,
            speaker: Speaker::User,
            text,
        });
        Ok(turn_index)
    }

    /// Appends a cycle to the open turn. A final-response cycle closes the
    /// turn and is mirrored as an agent utterance.
    pub fn append_cycle(&mut self, turn_index: u32, cycle: Cycle) -> Result<(), TranscriptError> {
        if self.terminated {
            return Err(TranscriptError::EpisodeTerminated);
        }
        cycle.action.validate()?;
        if cycle.action.is_final() == cycle.observation.is_some() {
            return Err(TranscriptError::ObservationMismatch);
        }
        if turn_index == 0 || turn_index > self.current_turn() {
            return Err(TranscriptError::TurnNotOpen(turn_index));
        }
        if let Some(existing) = self.trajectory(turn_index) {
            if existing.is_closed() {
                return Err(TranscriptError::TurnAlreadyClosed(turn_index));
            }
        } else if self.trajectories.len() as u32 + 1 != turn_index {
            return Err(TranscriptError::TurnNotOpen(turn_index));
        }
        if turn_index != self.current_turn() {
            return Err(TranscriptError::TurnAlreadyClosed(turn_index));
        }

        let final_text = match &cycle.action {
            AgentAction::FinalResponse { response_text } => Some(response_text.clone()),
            _ => None,
        };
        match self.trajectories.get_mut(turn_index as usize - 1) {
            Some(t) => t.cycles.push(cycle),
            None => self.trajectories.push(Trajectory {
                turn_index,
                cycles: vec![cycle],
                protocol_failure: false,
            }),
        }
        if let Some(text) = final_text {
            self.utterances.push(Utterance {
                turn_index,
                speaker: Speaker::Agent,
                text,
            });
        }
        Ok(())
    }

    pub fn mark_protocol_failure(&mut self, turn_index: u32) {
        if let Some(t) = turn_index
            .checked_sub(1)
            .and_then(|k| self.trajectories.get_mut(k as usize))
        {
            t.protocol_failure = true;
        }
    }

    pub fn push_summary(&mut self, summary: Summary) {
        self.summaries.push(summary);
    }

    pub fn terminate(&mut self) {
        self.terminated = true;
    }

    /// Dialogue view `q_1, H_1, ..., q_upto` (plus `H_upto` if it exists).
    /// Tool observations never appear.
    pub fn render_dialogue_view(&self, upto_turn: u32) -> String {
        join_entries(&self.dialogue_entries(upto_turn))
    }

    /// Dialogue entries added after the fold at `since_turn` (which covered
    /// everything up to and including `q_since`), through `q_upto`. `H_upto`
    /// is never included.
    pub fn render_dialogue_delta(&self, since_turn: Option<u32>, upto_turn: u32) -> String {
        let mut entries = self.dialogue_entries(upto_turn);
        entries.truncate(self.dialogue_entries_through_query(upto_turn));
        let skip = since_turn.map_or(0, |t| self.dialogue_entries_through_query(t));
        join_entries(&entries[skip.min(entries.len())..])
    }

    fn dialogue_entries_through_query(&self, turn: u32) -> usize {
        (1..turn)
            .map(|t| 1 + self.trajectory(t).map_or(0, |tr| tr.cycles.len() * 2 - usize::from(tr.is_closed())))
            .sum::<usize>()
            + 1
    }

    fn dialogue_entries(&self, upto_turn: u32) -> Vec<String> {
        let mut out = Vec::new();
        for turn in 1..=upto_turn.min(self.current_turn()) {
            if let Some(q) = self.user_query(turn) {
                out.push(format!("User: {q}"));
            }
            if let Some(traj) = self.trajectory(turn) {
                for cycle in &traj.cycles {
                    match &cycle.action {
                        AgentAction::ToolCall { .. } => {
                            out.push(format!("Assistant thought: {}", cycle.thought));
                            out.push(format!(
                                "Assistant action: {}",
                                cycle.action.to_action_json().unwrap_or_default()
                            ));
                        }
                        AgentAction::FinalResponse { response_text } => {
                            // thought and reply share one entry so entry counts stay simple
                            out.push(format!(
                                "Assistant thought: {}\nAssistant: {response_text}",
                                cycle.thought
                            ));
                        }
                    }
                }
            }
        }
        out
    }

    /// Raw transcript of turns `from..=to` including observations, in the
    /// form the summarization baselines compress.
    pub fn render_raw_turns(&self, from: u32, to: u32) -> String {
        let mut out = Vec::new();
        for turn in from.max(1)..=to.min(self.current_turn()) {
            if let Some(q) = self.user_query(turn) {
                out.push(format!("User: {q}"));
            }
            if let Some(traj) = self.trajectory(turn) {
                for cycle in &traj.cycles {
                    out.push(format!("Assistant thought: {}", cycle.thought));
                    match &cycle.action {
                        AgentAction::ToolCall { .. } => {
                            out.push(format!(
                                "Assistant action: {}",
                                cycle.action.to_action_json().unwrap_or_default()
                            ));
                            out.push(format!(
                                "Observation: {}",
                                cycle.observation.as_deref().unwrap_or_default()
                            ));
                        }
                        AgentAction::FinalResponse { response_text } => {
                            out.push(format!("Assistant: {response_text}"));
                        }
                    }
                }
            }
        }
        out.join("\n")
    }

    /// Numbered view of trajectories `1..upto_turn-1`.
    pub fn render_line_indexed(&self, upto_turn: u32) -> LineIndexedHistory {
        let last = upto_turn.saturating_sub(1);
        LineIndexedHistory::build(self.trajectories.iter().filter(|t| t.turn_index <= last))
    }
}

fn join_entries(entries: &[String]) -> String {
    entries.join("\n")
}
