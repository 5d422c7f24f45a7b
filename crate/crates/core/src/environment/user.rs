use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatMessage, ChatRequest, ModelRole, RoleRouter};
use crate::transcript::EpisodeLedger;

pub const DEFAULT_SENTINEL: &str = "###DONE###";

const OPENING: &str = "Hi! How can I help you today?";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum UserScenario {
    /// Fixed user lines. With alternates, the seed picks one script.
    Scripted {
        turns: Vec<String>,
        #[serde(default)]
        alternates: Vec<Vec<String>>,
    },
    /// A simulated user driven by the user_sim model.
    Llm { instructions: String },
}

#[derive(Debug, Error)]
pub enum UserError {
    #[error("user script exhausted before the termination sentinel")]
    ScriptExhausted,
    #[error("user simulator: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserReply {
    pub text: String,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct UserSimulator {
    scenario: UserScenario,
    script: Vec<String>,
    cursor: usize,
    sentinel: String,
}

impl UserSimulator {
    pub fn new(scenario: &UserScenario, sentinel: &str, seed: u64) -> Self {
        let script = match scenario {
            UserScenario::Scripted { turns, alternates } => {
                let n = alternates.len() as u64 + 1;
                match (seed % n) as usize {
                    0 => turns.clone(),
                    k => alternates[k - 1].clone(),
                }
            }
            UserScenario::Llm { .. } => Vec::new(),
        };
        UserSimulator {
            scenario: scenario.clone(),
            script,
            cursor: 0,
            sentinel: sentinel.to_string(),
        }
    }

    pub fn sentinel(&self) -> &str {
        &self.sentinel
    }

    pub fn is_done(&self, text: &str) -> bool {
        text.contains(&self.sentinel)
    }

    /// Next user utterance given the conversation so far.
    pub async fn respond(&mut self, ledger: &EpisodeLedger, router: &RoleRouter) -> Result<UserReply, UserError> {
        let text = match &self.scenario {
            UserScenario::Scripted { .. } => {
                let line = self.script.get(self.cursor).cloned().ok_or(UserError::ScriptExhausted)?;
                self.cursor += 1;
                line
            }
            UserScenario::Llm { instructions } => {
                let request = user_sim_request(instructions, &self.sentinel, ledger);
                router.complete(ModelRole::UserSim, request).await?.trim().to_string()
            }
        };
        let done = self.is_done(&text);
        Ok(UserReply { text, done })
    }
}

/// The simulator plays the user, so roles are mirrored: agent replies are
/// sent as user messages and earlier user utterances as assistant messages.
pub fn user_sim_request(instructions: &str, sentinel: &str, ledger: &EpisodeLedger) -> ChatRequest {
    let system = format!(
        "You are playing a customer talking to a customer service agent.\n\
         Instructions for your role:\n{instructions}\n\n\
         Rules:\n\
         - Write one short message per reply, as the customer would type it.\n\
         - Reveal information only when it is needed or asked for.\n\
         - Do not invent details that are not in your instructions.\n\
         - When your goal is met, or it cannot be met, reply with {sentinel} alone."
    );
    let mut messages = vec![ChatMessage::system(system), ChatMessage::user(OPENING)];
    for u in ledger.user_utterances() {
        messages.push(ChatMessage::assistant(u.text.clone()));
        if let Some(reply) = ledger.trajectory(u.turn_index).and_then(|t| t.final_text()) {
            messages.push(ChatMessage::user(reply));
        }
    }
    ChatRequest::new(messages)
}
