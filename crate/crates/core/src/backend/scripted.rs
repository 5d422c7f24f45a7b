//! Deterministic backends for tests and offline runs.

use std::collections::BTreeMap;
use std::sync::Mutex;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, CallRecord, ChatBackend, ChatRequest, MessageRole, ModelRole};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Every message content, newline-joined.
    #[default]
    Whole,
    /// Content of the last message only.
    Last,
    /// Content of the system message(s).
    System,
}

/// One predicate over the prompt. Exactly one of `contains` / `regex`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub negate: bool,
}

impl Condition {
    pub fn contains(s: impl Into<String>) -> Self {
        Condition {
            contains: Some(s.into()),
            ..Default::default()
        }
    }

    pub fn regex(s: impl Into<String>) -> Self {
        Condition {
            regex: Some(s.into()),
            ..Default::default()
        }
    }

    pub fn in_last(mut self) -> Self {
        self.scope = Scope::Last;
        self
    }

    pub fn in_system(mut self) -> Self {
        self.scope = Scope::System;
        self
    }

    pub fn not(mut self) -> Self {
        self.negate = !self.negate;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRule {
    /// All conditions must hold; an empty list matches any prompt.
    #[serde(default)]
    pub when: Vec<Condition>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_uses: Option<u32>,
}

impl ScriptedRule {
    pub fn always(response: impl Into<String>) -> Self {
        ScriptedRule {
            when: Vec::new(),
            response: response.into(),
            max_uses: None,
        }
    }

    pub fn when(conditions: Vec<Condition>, response: impl Into<String>) -> Self {
        ScriptedRule {
            when: conditions,
            response: response.into(),
            max_uses: None,
        }
    }

    pub fn limit(mut self, n: u32) -> Self {
        self.max_uses = Some(n);
        self
    }
}

enum Pattern {
    Contains(String),
    Regex(Regex),
}

struct Compiled {
    pattern: Pattern,
    scope: Scope,
    negate: bool,
}

impl Compiled {
    fn matches(&self, req: &ChatRequest) -> bool {
        let text = match self.scope {
            Scope::Whole => req.prompt_text(),
            Scope::Last => req.messages.last().map(|m| m.content.clone()).unwrap_or_default(),
            Scope::System => req
                .messages
                .iter()
                .filter(|m| m.role == MessageRole::System)
                .map(|m| m.content.as_str())
                .collect::<Vec<_>>()
                .join("\n"),
        };
        let hit = match &self.pattern {
            Pattern::Contains(s) => text.contains(s.as_str()),
            Pattern::Regex(r) => r.is_match(&text),
        };
        hit != self.negate
    }
}

/// Ordered rule list; the first matching rule with uses left answers.
pub struct ScriptedBackend {
    rules: Vec<(Vec<Compiled>, ScriptedRule)>,
    uses: Mutex<Vec<u32>>,
    label: String,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Result<Self, BackendError> {
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            let mut conds = Vec::new();
            for c in &rule.when {
                let pattern = match (&c.contains, &c.regex) {
                    (Some(s), None) => Pattern::Contains(s.clone()),
                    (None, Some(r)) => Pattern::Regex(
                        Regex::new(r).map_err(|e| BackendError::Config(format!("bad rule regex {r:?}: {e}")))?,
                    ),
                    _ => {
                        return Err(BackendError::Config(
                            "a rule condition needs exactly one of contains/regex".into(),
                        ))
                    }
                };
                conds.push(Compiled {
                    pattern,
                    scope: c.scope,
                    negate: c.negate,
                });
            }
            compiled.push((conds, rule));
        }
        let n = compiled.len();
        Ok(ScriptedBackend {
            rules: compiled,
            uses: Mutex::new(vec![0; n]),
            label: "scripted".into(),
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    fn endpoint(&self) -> String {
        self.label.clone()
    }

    async fn complete(&self, role: ModelRole, request: &ChatRequest) -> Result<String, BackendError> {
        let mut uses = self.uses.lock().expect("scripted state poisoned");
        for (i, (conds, rule)) in self.rules.iter().enumerate() {
            if rule.max_uses.is_some_and(|m| uses[i] >= m) {
                continue;
            }
            if conds.iter().all(|c| c.matches(request)) {
                uses[i] += 1;
                return Ok(rule.response.clone());
            }
        }
        Err(BackendError::NoMatchingRule {
            role: role.to_string(),
        })
    }
}

type Responder = dyn Fn(ModelRole, &ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure; for test policies too dynamic for rules.
pub struct FnBackend {
    f: Box<Responder>,
    label: String,
}

impl FnBackend {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(ModelRole, &ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        FnBackend {
            f: Box::new(f),
            label: label.into(),
        }
    }
}

#[async_trait]
impl ChatBackend for FnBackend {
    fn endpoint(&self) -> String {
        self.label.clone()
    }

    async fn complete(&self, role: ModelRole, request: &ChatRequest) -> Result<String, BackendError> {
        (self.f)(role, request)
    }
}

/// Serves recorded responses back, per role and in order, checking that each
/// prompt hashes to what was recorded.
pub struct ReplayBackend {
    queues: Mutex<BTreeMap<ModelRole, std::collections::VecDeque<CallRecord>>>,
}

impl ReplayBackend {
    pub fn new(calls: Vec<CallRecord>) -> Self {
        let mut queues: BTreeMap<ModelRole, std::collections::VecDeque<CallRecord>> = BTreeMap::new();
        for c in calls {
            queues.entry(c.role).or_default().push_back(c);
        }
        ReplayBackend {
            queues: Mutex::new(queues),
        }
    }
}

#[async_trait]
impl ChatBackend for ReplayBackend {
    fn endpoint(&self) -> String {
        "replay".into()
    }

    async fn complete(&self, role: ModelRole, request: &ChatRequest) -> Result<String, BackendError> {
        let mut queues = self.queues.lock().expect("replay state poisoned");
        let next = queues
            .get_mut(&role)
            .and_then(|q| q.pop_front())
            .ok_or_else(|| BackendError::ReplayExhausted(role.to_string()))?;
        let found = request.prompt_sha256();
        if next.prompt_sha256 != found {
            return Err(BackendError::ReplayMismatch {
                role: role.to_string(),
                expected: next.prompt_sha256,
                found,
            });
        }
        Ok(next.response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChatMessage, RoleRouter};
    use std::sync::Arc;

    fn req(texts: &[&str]) -> ChatRequest {
        ChatRequest::new(texts.iter().map(|t| ChatMessage::user(*t)).collect())
    }

    #[tokio::test]
    async fn first_match_wins_and_limits_apply() {
        let b = ScriptedBackend::new(vec![
            ScriptedRule::when(vec![Condition::contains("capital of China")], "A").limit(1),
            ScriptedRule::when(vec![Condition::contains("capital")], "B"),
        ])
        .unwrap();
        let r = req(&["What is the capital of China?"]);
        assert_eq!(b.complete(ModelRole::Agent, &r).await.unwrap(), "A");
        assert_eq!(b.complete(ModelRole::Agent, &r).await.unwrap(), "B");
        let err = b.complete(ModelRole::Agent, &req(&["hello"])).await.unwrap_err();
        assert!(matches!(err, BackendError::NoMatchingRule { .. }));
    }

    #[tokio::test]
    async fn scoped_and_negated_conditions() {
        let b = ScriptedBackend::new(vec![
            ScriptedRule::when(
                vec![Condition::contains("<observation>").in_last(), Condition::contains("Beijing")],
                "final",
            ),
            ScriptedRule::when(vec![Condition::contains("<observation>").not()], "act"),
        ])
        .unwrap();
        assert_eq!(b.complete(ModelRole::Agent, &req(&["q"])).await.unwrap(), "act");
        let r = req(&["q", "<observation>\nBeijing\n</observation>"]);
        assert_eq!(b.complete(ModelRole::Agent, &r).await.unwrap(), "final");
    }

    #[test]
    fn condition_needs_one_pattern() {
        let rule = ScriptedRule::when(vec![Condition::default()], "x");
        assert!(matches!(ScriptedBackend::new(vec![rule]), Err(BackendError::Config(_))));
    }

    #[tokio::test]
    async fn replay_returns_recorded_responses_in_order() {
        let live = ScriptedBackend::new(vec![
            ScriptedRule::always("one").limit(1),
            ScriptedRule::always("two"),
        ])
        .unwrap();
        let router = RoleRouter::uniform(Arc::new(live), "m");
        let a = router.complete(ModelRole::Agent, req(&["p1"])).await.unwrap();
        let b = router.complete(ModelRole::Agent, req(&["p2"])).await.unwrap();

        let replay = RoleRouter::uniform(Arc::new(ReplayBackend::new(router.calls())), "m");
        assert_eq!(replay.complete(ModelRole::Agent, req(&["p1"])).await.unwrap(), a);
        assert_eq!(replay.complete(ModelRole::Agent, req(&["p2"])).await.unwrap(), b);
        assert!(matches!(
            replay.complete(ModelRole::Agent, req(&["p3"])).await,
            Err(BackendError::ReplayExhausted(_))
        ));
    }

    #[tokio::test]
    async fn replay_detects_prompt_drift() {
        let live = ScriptedBackend::new(vec![ScriptedRule::always("x")]).unwrap();
        let router = RoleRouter::uniform(Arc::new(live), "m");
        router.complete(ModelRole::Agent, req(&["p1"])).await.unwrap();
        let replay = RoleRouter::uniform(Arc::new(ReplayBackend::new(router.calls())), "m");
        assert!(matches!(
            replay.complete(ModelRole::Agent, req(&["different"])).await,
            Err(BackendError::ReplayMismatch { .. })
        ));
    }
}
