use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, AgentError, Session};
use crate::backend::RoleRouter;
use crate::environment::{evaluate_reward, Domain, NoiseConfig, TaskSpec};
use crate::folding::PromptTemplates;
use crate::transcript::log::{Clock, EventPayload};

pub const CMD_CONTEXT: &str = ":ctx";
pub const CMD_QUIT: &str = ":quit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatOutput {
    Reply {
        turn_index: u32,
        text: String,
        protocol_failure: bool,
    },
    Context {
        text: String,
    },
    /// Reward is present only when a goal was given and a turn was played.
    Quit {
        turns: u32,
        reward: Option<f64>,
    },
}

/// A human-driven session: each line is a user turn or a command.
pub struct ChatSession {
    templates: Arc<PromptTemplates>,
    router: RoleRouter,
    config: AgentConfig,
    task: Option<TaskSpec>,
    session: Session,
    closed: bool,
}

impl ChatSession {
    /// With a task, the world starts from its patched state and `:quit`
    /// scores its goal.
    pub fn new(
        domain: &Domain,
        task: Option<TaskSpec>,
        templates: Arc<PromptTemplates>,
        router: RoleRouter,
        config: AgentConfig,
        episode_id: impl Into<String>,
    ) -> Self {
        let world = match &task {
            Some(t) => domain.world_for(t),
            None => domain.initial_world(),
        };
        let session = Session::new(domain, world, NoiseConfig::off(), episode_id, Clock::Wall);
        ChatSession {
            templates,
            router,
            config,
            task,
            session,
            closed: false,
        }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn router(&self) -> &RoleRouter {
        &self.router
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn turns(&self) -> u32 {
        self.session.metrics.turn_prompt_tokens.len() as u32
    }

    /// Context shown to the agent on the latest turn.
    pub fn context(&self) -> String {
        self.session.last_context.clone()
    }

    pub async fn handle(&mut self, line: &str) -> Result<ChatOutput, AgentError> {
        match line.trim() {
            CMD_CONTEXT => Ok(ChatOutput::Context { text: self.context() }),
            CMD_QUIT => Ok(self.quit()),
            text => {
                let agent = Agent::new(&self.templates, &self.router, &self.config);
                let report = agent.run_turn(&mut self.session, text).await?;
                Ok(ChatOutput::Reply {
                    turn_index: report.turn_index,
                    text: report.final_text,
                    protocol_failure: report.protocol_failure,
                })
            }
        }
    }

    pub fn quit(&mut self) -> ChatOutput {
        let turns = self.turns();
        let reward = match &self.task {
            Some(task) if turns > 0 => Some(evaluate_reward(task, &self.session.world)),
            _ => None,
        };
        if !self.closed {
            self.session.ledger.terminate();
            self.session.log.record(
                self.session.ledger.current_turn(),
                EventPayload::End {
                    reward,
                    failure_cause: None,
                },
            );
            self.closed = true;
        }
        ChatOutput::Quit { turns, reward }
    }
}
