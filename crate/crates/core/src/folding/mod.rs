//! Per-turn context folding: conversation summarization followed by
//! line-range extraction over the full tool history.
//!
//! Each stage is a prompt render, one model call, a parse, and mechanical
//! validation. A malformed reply gets exactly one reprompt carrying a format
//! reminder; a second malformed reply is a hard error.

mod extraction;
mod summary;
pub mod templates;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::backend::{BackendError, ChatMessage, ChatRequest, ModelRole, RoleRouter};
use crate::environment::{render_tool_specs, ToolSpec};
use crate::transcript::{resolve_lines, AgentAction, EpisodeLedger, LineIndexedHistory, TranscriptError};

pub use extraction::{parse_extraction, render_blocks, ContextBlock};
pub use summary::{parse_summary, Summary, TodoItem, TODO_HEADER};
pub use templates::{PromptTemplates, Template, TemplateError};

use templates::{PUT_CONTEXT_HERE, PUT_CONVERSATION_HERE, PUT_HISTORY_HERE, PUT_TOOLS_HERE};

/// Stands in for the previous summary on the first fold.
pub const NO_SUMMARY_YET: &str = "(none yet)";
pub const UNVERIFIED_MARK: &str = "[UNVERIFIED]";

const SUMMARY_REMINDER: &str = "Your previous reply did not follow the required format. Reply again with one plain text summary block, then the line \"To-do list (The task should follow the execution order):\" followed by the pending steps written as \"Step1. ...\", \"Step2. ...\".";

#[derive(Debug, Error)]
pub enum FoldError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("summarizer output has no to-do list section")]
    MissingTodoMarker,
    #[error("extraction block {block} is malformed: {reason}")]
    MalformedBlock { block: usize, reason: String },
    #[error(transparent)]
    RangeOutOfBounds(TranscriptError),
    #[error("fact is not verbatim in its cited lines: {fact:?}")]
    VerbatimViolation { fact: String },
    #[error("no user utterance to fold on")]
    NothingToFold,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerbatimPolicy {
    /// Keep the block; unverified facts are marked in the agent prompt.
    #[default]
    Annotate,
    DropBlock,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldConfig {
    pub summarize_enabled: bool,
    pub extract_enabled: bool,
    pub verbatim_policy: VerbatimPolicy,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig {
            summarize_enabled: true,
            extract_enabled: true,
            verbatim_policy: VerbatimPolicy::Annotate,
        }
    }
}

/// What the agent conditions on for one turn: summary plus extracted blocks,
/// with each block's cited lines resolved by the runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedContext {
    pub turn_index: u32,
    pub summary: Summary,
    pub blocks: Vec<ContextBlock>,
    pub resolved_originals: Vec<String>,
    pub history_lines: usize,
}

impl FoldedContext {
    /// Text placed into the agent prompt's selected-context slot.
    pub fn render_selected_context(&self) -> String {
        let mut out = String::new();
        if self.summary.raw_dialogue {
            out.push_str("Conversation so far:\n");
            out.push_str(&self.summary.narrative);
        } else {
            out.push_str("Conversation summary:\n");
            out.push_str(&self.summary.render());
        }
        for (i, (b, original)) in self.blocks.iter().zip(&self.resolved_originals).enumerate() {
            out.push_str(&format!("\n\nExtracted context {} ({})", i + 1, b.range));
            if !b.block_summary.is_empty() {
                out.push_str(&format!("\nSummary: {}", b.block_summary));
            }
            if !b.facts.is_empty() {
                out.push_str("\nFacts:");
                for (fact, ok) in b.facts.iter().zip(&b.verbatim_ok) {
                    if *ok {
                        out.push_str(&format!("\n- {fact}"));
                    } else {
                        out.push_str(&format!("\n- {UNVERIFIED_MARK} {fact}"));
                    }
                }
            }
            if !b.constraints.is_empty() {
                out.push_str("\nConstraints:");
                for c in &b.constraints {
                    out.push_str(&format!("\n- {c}"));
                }
            }
            if !b.hint.is_empty() {
                out.push_str(&format!("\nHint: {}", b.hint));
            }
            out.push_str("\nOriginal text:\n");
            out.push_str(original);
        }
        out
    }
}

pub fn render_summarizer_prompt(templates: &PromptTemplates, prev: Option<&Summary>, conversation_delta: &str) -> String {
    let history = prev.map_or_else(|| NO_SUMMARY_YET.to_string(), Summary::render);
    templates.summarizer.render(&[
        (PUT_HISTORY_HERE, &history),
        (PUT_CONVERSATION_HERE, conversation_delta),
    ])
}

pub fn render_extractor_prompt(
    templates: &PromptTemplates,
    tools: &[ToolSpec],
    summary: &Summary,
    history: &LineIndexedHistory,
) -> String {
    let conversation = if summary.raw_dialogue {
        summary.narrative.clone()
    } else {
        summary.render()
    };
    templates.extractor.render(&[
        (PUT_TOOLS_HERE, &render_tool_specs(tools)),
        (PUT_CONVERSATION_HERE, &conversation),
        (PUT_CONTEXT_HERE, &history.numbered_text()),
    ])
}

fn extraction_reminder(err: &FoldError) -> String {
    format!(
        "Your previous reply did not follow the required format ({err}). Reply again with the selected context blocks only. Every block needs an \"Original\" field of the form \"Lines: <start>-<end>\" using line numbers from the numbered history. If nothing is relevant, return an empty output."
    )
}

/// Runs the folding stages against one router.
pub struct Folder<'a> {
    pub templates: &'a PromptTemplates,
    pub router: &'a RoleRouter,
}

impl<'a> Folder<'a> {
    pub fn new(templates: &'a PromptTemplates, router: &'a RoleRouter) -> Self {
        Folder { templates, router }
    }

    async fn ask(&self, role: ModelRole, messages: Vec<ChatMessage>) -> Result<String, BackendError> {
        let req = ChatRequest::new(messages).with_max_output_tokens(self.router.max_output_tokens());
        self.router.complete(role, req).await
    }

    /// Incremental summary for the current turn: previous summary plus the
    /// dialogue delta since it. The result is stored in the ledger.
    pub async fn summarize(&self, ledger: &mut EpisodeLedger) -> Result<Summary, FoldError> {
        let turn = ledger.current_turn();
        if turn == 0 {
            return Err(FoldError::NothingToFold);
        }
        let prev = ledger.summaries.iter().rev().find(|s| !s.raw_dialogue).cloned();
        let delta = ledger.render_dialogue_delta(prev.as_ref().map(|s| s.turn_index), turn);
        let prompt = render_summarizer_prompt(self.templates, prev.as_ref(), &delta);
        let summary = self.summarize_prompt(prompt, turn).await?;
        ledger.push_summary(summary.clone());
        Ok(summary)
    }

    /// One summarizer call (plus at most one reprompt) on a rendered prompt.
    pub async fn summarize_prompt(&self, prompt: String, turn: u32) -> Result<Summary, FoldError> {
        let mut messages = vec![ChatMessage::user(prompt)];
        let raw = self.ask(ModelRole::Summarizer, messages.clone()).await?;
        match parse_summary(&raw, turn) {
            Ok(s) => Ok(s),
            Err(FoldError::MissingTodoMarker) => {
                debug!(turn, "summarizer output malformed, reprompting");
                messages.push(ChatMessage::assistant(raw));
                messages.push(ChatMessage::user(SUMMARY_REMINDER));
                let raw = self.ask(ModelRole::Summarizer, messages).await?;
                parse_summary(&raw, turn)
            }
            Err(e) => Err(e),
        }
    }

    pub async fn extract(
        &self,
        tools: &[ToolSpec],
        summary: &Summary,
        history: &LineIndexedHistory,
    ) -> Result<Vec<ContextBlock>, FoldError> {
        let prompt = render_extractor_prompt(self.templates, tools, summary, history);
        let mut messages = vec![ChatMessage::user(prompt)];
        let raw = self.ask(ModelRole::Extractor, messages.clone()).await?;
        match parse_extraction(&raw, history) {
            Ok(blocks) => Ok(blocks),
            Err(e @ (FoldError::MalformedBlock { .. } | FoldError::RangeOutOfBounds(_))) => {
                debug!(error = %e, "extractor output malformed, reprompting");
                messages.push(ChatMessage::assistant(raw));
                messages.push(ChatMessage::user(extraction_reminder(&e)));
                let raw = self.ask(ModelRole::Extractor, messages).await?;
                parse_extraction(&raw, history)
            }
            Err(e) => Err(e),
        }
    }

    /// Builds the folded context for the ledger's current turn.
    pub async fn fold(
        &self,
        ledger: &mut EpisodeLedger,
        tools: &[ToolSpec],
        config: &FoldConfig,
    ) -> Result<FoldedContext, FoldError> {
        let turn = ledger.current_turn();
        if turn == 0 {
            return Err(FoldError::NothingToFold);
        }
        let summary = if config.summarize_enabled {
            self.summarize(ledger).await?
        } else {
            let s = Summary::raw(turn, ledger.render_dialogue_view(turn));
            ledger.push_summary(s.clone());
            s
        };

        let history = ledger.render_line_indexed(turn);
        let mut blocks = if !config.extract_enabled {
            raw_tool_blocks(ledger, &history)
        } else if history.is_empty() {
            Vec::new()
        } else {
            self.extract(tools, &summary, &history).await?
        };

        match config.verbatim_policy {
            VerbatimPolicy::Annotate => {}
            VerbatimPolicy::DropBlock => blocks.retain(ContextBlock::all_verbatim),
            VerbatimPolicy::Fail => {
                for b in &blocks {
                    if let Some(i) = b.verbatim_ok.iter().position(|ok| !ok) {
                        return Err(FoldError::VerbatimViolation {
                            fact: b.facts[i].clone(),
                        });
                    }
                }
            }
        }

        let resolved_originals = blocks
            .iter()
            .map(|b| resolve_lines(&history, b.range))
            .collect::<Result<Vec<_>, _>>()
            .map_err(FoldError::RangeOutOfBounds)?;
        Ok(FoldedContext {
            turn_index: turn,
            summary,
            blocks,
            resolved_originals,
            history_lines: history.len(),
        })
    }
}

/// Every prior observation as its own block, unfiltered.
fn raw_tool_blocks(ledger: &EpisodeLedger, history: &LineIndexedHistory) -> Vec<ContextBlock> {
    history
        .observation_spans()
        .into_iter()
        .map(|(key, range)| {
            let tool = ledger
                .trajectory(key.turn_index)
                .and_then(|t| t.cycles.get(key.cycle_index as usize - 1))
                .and_then(|c| match &c.action {
                    AgentAction::ToolCall { tool_name, .. } => Some(tool_name.clone()),
                    _ => None,
                })
                .unwrap_or_default();
            ContextBlock {
                block_summary: format!(
                    "Output of {tool} (turn {}, step {})",
                    key.turn_index, key.cycle_index
                ),
                range,
                facts: Vec::new(),
                constraints: Vec::new(),
                hint: String::new(),
                verbatim_ok: Vec::new(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Condition, ScriptedBackend, ScriptedRule};
    use crate::transcript::Cycle;
    use serde_json::{json, Map};
    use std::sync::Arc;

    const GOOD_SUMMARY: &str = "User asked for order O1.\nTo-do list (The task should follow the execution order):\nStep1. Look up O1";

    fn router(summ: Vec<ScriptedRule>, extr: Vec<ScriptedRule>) -> RoleRouter {
        RoleRouter::new()
            .route(ModelRole::Summarizer, Arc::new(ScriptedBackend::new(summ).unwrap()), "s")
            .route(ModelRole::Extractor, Arc::new(ScriptedBackend::new(extr).unwrap()), "e")
    }

    fn two_turn_ledger(obs: &str) -> EpisodeLedger {
        let mut l = EpisodeLedger::new();
        l.append_user("show order O1").unwrap();
        let p: Map<_, _> = json!({"order_id": "O1"}).as_object().cloned().unwrap();
        l.append_cycle(1, Cycle::tool("fetch", AgentAction::tool("get_order", p), obs))
            .unwrap();
        l.append_cycle(1, Cycle::finish("done", "Here it is.")).unwrap();
        l.append_user("what was the price?").unwrap();
        l
    }

    #[test]
    fn first_summarizer_prompt_uses_placeholder_text() {
        let t = PromptTemplates::builtin();
        let p = render_summarizer_prompt(&t, None, "User: Hi");
        assert!(p.contains("dialogue history condenser"));
        assert!(p.contains("===\n\n(none yet)\n\n==="));
        assert_eq!(p, render_summarizer_prompt(&t, None, "User: Hi"));
    }

    #[test]
    fn previous_summary_sits_in_first_fence() {
        let t = PromptTemplates::builtin();
        let prev = Summary::new(1, "S1", vec![]);
        let p = render_summarizer_prompt(&t, Some(&prev), "User: book flight");
        let first_fence = p.split("===").nth(1).unwrap();
        assert!(first_fence.contains("S1"));
        assert!(!first_fence.contains("book flight"));
    }

    #[test]
    fn extractor_prompt_substitutions() {
        let t = PromptTemplates::builtin();
        let tool = ToolSpec::new("get_order", "Fetch an order");
        let s = Summary::new(1, "n", vec!["Look up".into()]);
        let p = render_extractor_prompt(&t, &[tool], &s, &LineIndexedHistory::default());
        assert!(p.split("===").nth(1).unwrap().contains("get_order"));
        assert!(p.contains("===\n\n\n\n==="), "empty history leaves an empty fence");
        assert!(p.contains("\"Lines: <start>-<end>\""));
    }

    #[tokio::test]
    async fn summarize_stores_summary() {
        let r = router(vec![ScriptedRule::always(GOOD_SUMMARY)], vec![]);
        let t = PromptTemplates::builtin();
        let mut l = EpisodeLedger::new();
        l.append_user("show order O1").unwrap();
        let s = Folder::new(&t, &r).summarize(&mut l).await.unwrap();
        assert_eq!(s.turn_index, 1);
        assert_eq!(s.todo.len(), 1);
        assert_eq!(l.summaries, vec![s]);
    }

    #[tokio::test]
    async fn summarize_retries_once_then_fails() {
        let r = router(vec![ScriptedRule::always("no marker here")], vec![]);
        let t = PromptTemplates::builtin();
        let mut l = EpisodeLedger::new();
        l.append_user("hi").unwrap();
        let err = Folder::new(&t, &r).summarize(&mut l).await.unwrap_err();
        assert!(matches!(err, FoldError::MissingTodoMarker));
        let calls = r.calls_for(ModelRole::Summarizer);
        assert_eq!(calls.len(), 2);
        assert!(calls[1].request.messages.last().unwrap().content.contains("required format"));
    }

    #[tokio::test]
    async fn summarize_recovers_after_one_bad_reply() {
        let r = router(
            vec![ScriptedRule::always("oops").limit(1), ScriptedRule::always(GOOD_SUMMARY)],
            vec![],
        );
        let t = PromptTemplates::builtin();
        let mut l = EpisodeLedger::new();
        l.append_user("hi").unwrap();
        assert!(Folder::new(&t, &r).summarize(&mut l).await.is_ok());
    }

    #[tokio::test]
    async fn consecutive_folds_chain_summaries() {
        let r = router(
            vec![
                ScriptedRule::always("First.\nTo-do list:\nStep1. a").limit(1),
                ScriptedRule::always("Second.\nTo-do list:\nStep1. b"),
            ],
            vec![ScriptedRule::always("")],
        );
        let t = PromptTemplates::builtin();
        let mut l = EpisodeLedger::new();
        l.append_user("q1").unwrap();
        let f = Folder::new(&t, &r);
        let first = f.summarize(&mut l).await.unwrap();
        l.append_cycle(1, Cycle::finish("t", "r1")).unwrap();
        l.append_user("q2").unwrap();
        f.summarize(&mut l).await.unwrap();
        let calls = r.calls_for(ModelRole::Summarizer);
        let second_prompt = &calls[1].request.messages[0].content;
        assert!(second_prompt.contains(&first.render()));
        assert!(second_prompt.contains("User: q2"));
        assert!(!second_prompt.contains("User: q1"));
    }

    #[tokio::test]
    async fn fold_turn_one_has_no_blocks_and_no_extractor_call() {
        let r = router(vec![ScriptedRule::always(GOOD_SUMMARY)], vec![]);
        let t = PromptTemplates::builtin();
        let mut l = EpisodeLedger::new();
        l.append_user("hi").unwrap();
        let folded = Folder::new(&t, &r).fold(&mut l, &[], &FoldConfig::default()).await.unwrap();
        assert!(folded.blocks.is_empty());
        assert!(r.calls_for(ModelRole::Extractor).is_empty());
    }

    #[tokio::test]
    async fn fold_resolves_cited_lines() {
        let l0 = two_turn_ledger("{\n  \"price\": 42\n}");
        let h = l0.render_line_indexed(2);
        let (_, span) = h.observation_spans()[0];
        let reply = format!("- Summary: price\n- Original: {span}\n- Facts:\n    - \"price\": 42\n- Hint: answer directly\n");
        let r = router(vec![ScriptedRule::always(GOOD_SUMMARY)], vec![ScriptedRule::always(reply)]);
        let t = PromptTemplates::builtin();
        let mut l = l0.clone();
        let folded = Folder::new(&t, &r).fold(&mut l, &[], &FoldConfig::default()).await.unwrap();
        assert_eq!(folded.resolved_originals, vec!["{\n  \"price\": 42\n}".to_string()]);
        assert!(folded.blocks[0].all_verbatim());
        assert!(folded.render_selected_context().contains("\"price\": 42"));
    }

    #[tokio::test]
    async fn verbatim_policies() {
        let l0 = two_turn_ledger("price: 42");
        let h = l0.render_line_indexed(2);
        let (_, span) = h.observation_spans()[0];
        let reply = format!("Summary: s\nOriginal: {span}\nFacts:\n- price: 41\n");
        let t = PromptTemplates::builtin();
        let run = |policy| {
            let r = router(vec![ScriptedRule::always(GOOD_SUMMARY)], vec![ScriptedRule::always(reply.clone())]);
            let mut l = l0.clone();
            let t = t.clone();
            async move {
                let cfg = FoldConfig {
                    verbatim_policy: policy,
                    ..Default::default()
                };
                Folder::new(&t, &r).fold(&mut l, &[], &cfg).await
            }
        };
        let annotated = run(VerbatimPolicy::Annotate).await.unwrap();
        assert!(annotated.render_selected_context().contains("[UNVERIFIED] price: 41"));
        assert!(run(VerbatimPolicy::DropBlock).await.unwrap().blocks.is_empty());
        assert!(matches!(
            run(VerbatimPolicy::Fail).await,
            Err(FoldError::VerbatimViolation { .. })
        ));
    }

    #[tokio::test]
    async fn extraction_ablation_carries_raw_observations() {
        let r = router(vec![ScriptedRule::always(GOOD_SUMMARY)], vec![]);
        let t = PromptTemplates::builtin();
        let mut l = two_turn_ledger("line one\nline two");
        let cfg = FoldConfig {
            extract_enabled: false,
            ..Default::default()
        };
        let folded = Folder::new(&t, &r).fold(&mut l, &[], &cfg).await.unwrap();
        assert_eq!(folded.resolved_originals, vec!["line one\nline two".to_string()]);
        assert!(r.calls_for(ModelRole::Extractor).is_empty());
    }

    #[tokio::test]
    async fn summarization_ablation_passes_raw_dialogue_to_extractor() {
        let r = router(
            vec![],
            vec![ScriptedRule::when(vec![Condition::contains("User: what was the price?")], "")],
        );
        let t = PromptTemplates::builtin();
        let mut l = two_turn_ledger("x");
        let cfg = FoldConfig {
            summarize_enabled: false,
            ..Default::default()
        };
        let folded = Folder::new(&t, &r).fold(&mut l, &[], &cfg).await.unwrap();
        assert!(folded.summary.raw_dialogue);
        assert!(folded.render_selected_context().contains("User: show order O1"));
        assert!(r.calls_for(ModelRole::Summarizer).is_empty());
        assert_eq!(r.calls_for(ModelRole::Extractor).len(), 1);
    }

    #[tokio::test]
    async fn malformed_extraction_retries_once() {
        let r = router(
            vec![ScriptedRule::always(GOOD_SUMMARY)],
            vec![ScriptedRule::always("Summary: s\nOriginal: somewhere\n")],
        );
        let t = PromptTemplates::builtin();
        let mut l = two_turn_ledger("x");
        let err = Folder::new(&t, &r).fold(&mut l, &[], &FoldConfig::default()).await.unwrap_err();
        assert!(matches!(err, FoldError::MalformedBlock { .. }));
        assert_eq!(r.calls_for(ModelRole::Extractor).len(), 2);
    }
}
