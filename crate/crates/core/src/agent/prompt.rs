use crate::backend::ChatMessage;
use crate::environment::{render_tool_specs, ToolSpec};
use crate::folding::templates::{PUT_SELECTED_CONTEXT_HERE, PUT_TOOLS_HERE, PUT_USER_INSTRUCTIONS_HERE};
use crate::folding::{FoldedContext, PromptTemplates};
use crate::transcript::{AgentAction, Cycle, EpisodeLedger, PROTOCOL_REPAIR_TOOL};

use super::grammar::render_action_block;

pub fn render_agent_system(
    templates: &PromptTemplates,
    tools: &[ToolSpec],
    selected_context: &str,
    user_instructions: &str,
) -> String {
    templates.agent.render(&[
        (PUT_TOOLS_HERE, &render_tool_specs(tools)),
        (PUT_SELECTED_CONTEXT_HERE, selected_context),
        (PUT_USER_INSTRUCTIONS_HERE, user_instructions),
    ])
}

pub fn observation_message(observation: &str) -> ChatMessage {
    ChatMessage::user(format!("<observation>\n{observation}\n</observation>"))
}

/// Assistant/observation message pairs for a run of cycles. A repair cycle
/// replays the model's malformed text followed by the corrective note.
pub fn cycle_messages(cycles: &[Cycle]) -> Vec<ChatMessage> {
    let mut out = Vec::new();
    for c in cycles {
        match &c.action {
            AgentAction::ToolCall { tool_name, parameters } if tool_name == PROTOCOL_REPAIR_TOOL => {
                let raw = parameters.get("raw").and_then(|v| v.as_str()).unwrap_or_default();
                out.push(ChatMessage::assistant(raw));
            }
            AgentAction::ToolCall { tool_name, parameters } => {
                out.push(ChatMessage::assistant(format!(
                    "<inner>\n{}\n</inner>\n{}",
                    c.thought,
                    render_action_block(tool_name, parameters)
                )));
            }
            AgentAction::FinalResponse { response_text } => {
                out.push(ChatMessage::assistant(format!(
                    "<inner>\n{}\n</inner>\n<final>\n{response_text}\n</final>",
                    c.thought
                )));
            }
        }
        if let Some(obs) = &c.observation {
            out.push(observation_message(obs));
        }
    }
    out
}

/// Turns `from..=to` as raw chat messages: each query followed by every
/// cycle of its trajectory, observations included.
pub fn raw_turn_messages(ledger: &EpisodeLedger, from: u32, to: u32) -> Vec<ChatMessage> {
    let mut out = Vec::new();
    for t in from..=to {
        if let Some(q) = ledger.user_query(t) {
            out.push(ChatMessage::user(q));
        }
        if let Some(traj) = ledger.trajectory(t) {
            out.extend(cycle_messages(&traj.cycles));
        }
    }
    out
}

/// System prompt, then `history`, then the current query and this turn's
/// earlier exchanges.
pub fn assemble(system: String, history: Vec<ChatMessage>, query: &str, current: &[Cycle]) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(history.len() + current.len() * 2 + 2);
    messages.push(ChatMessage::system(system));
    messages.extend(history);
    messages.push(ChatMessage::user(query));
    messages.extend(cycle_messages(current));
    messages
}

/// Agent prompt conditioned on a folded context.
pub fn render_agent_prompt(
    templates: &PromptTemplates,
    tools: &[ToolSpec],
    folded: &FoldedContext,
    query: &str,
    current: &[Cycle],
    user_instructions: &str,
) -> Vec<ChatMessage> {
    let system = render_agent_system(templates, tools, &folded.render_selected_context(), user_instructions);
    assemble(system, Vec::new(), query, current)
}
