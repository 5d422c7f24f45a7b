use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AgentAction, Trajectory, TranscriptError};

/// Inclusive, 1-based range of physical lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineRange {
    pub start: usize,
    pub end: usize,
}

impl LineRange {
    pub fn new(start: usize, end: usize) -> Result<Self, TranscriptError> {
        if start == 0 || start > end {
            return Err(TranscriptError::InvalidRange { start, end });
        }
        Ok(LineRange { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for LineRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Lines: {}-{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanField {
    Thought,
    Action,
    Observation,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanKey {
    pub turn_index: u32,
    /// 1-based position of the cycle within its turn.
    pub cycle_index: u32,
    pub field: SpanField,
}

/// Physical-line rendering of finished trajectories.
///
/// Layout per turn:
///
/// ```text
/// ## Turn 1
/// Thought 1.1: ...
/// Action 1.1: {"action":"get_order","parameters":{"order_id":"O1"}}
/// Observation 1.1:
/// <observation lines>
/// Thought 1.2: ...
/// Final 1.2: ...
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LineIndexedHistory {
    lines: Vec<String>,
    spans: BTreeMap<SpanKey, LineRange>,
}

impl LineIndexedHistory {
    pub(crate) fn build<'a>(trajectories: impl Iterator<Item = &'a Trajectory>) -> Self {
        let mut h = LineIndexedHistory::default();
        for traj in trajectories {
            let t = traj.turn_index;
            h.push_block(format!("## Turn {t}"), None);
            for (ci, cycle) in traj.cycles.iter().enumerate() {
                let c = ci as u32 + 1;
                let key = |field| SpanKey {
                    turn_index: t,
                    cycle_index: c,
                    field,
                };
                h.push_block(format!("Thought {t}.{c}: {}", cycle.thought), Some(key(SpanField::Thought)));
                match &cycle.action {
                    AgentAction::ToolCall { .. } => {
                        let json = cycle.action.to_action_json().unwrap_or_default();
                        h.push_block(format!("Action {t}.{c}: {json}"), Some(key(SpanField::Action)));
                        h.push_block(format!("Observation {t}.{c}:"), None);
                        h.push_block(
                            cycle.observation.clone().unwrap_or_default(),
                            Some(key(SpanField::Observation)),
                        );
                    }
                    AgentAction::FinalResponse { response_text } => {
                        h.push_block(format!("Final {t}.{c}: {response_text}"), Some(key(SpanField::Final)));
                    }
                }
            }
        }
        h
    }

    fn push_block(&mut self, text: String, key: Option<SpanKey>) {
        let start = self.lines.len() + 1;
        self.lines.extend(text.split('\n').map(str::to_string));
        if let Some(key) = key {
            self.spans.insert(
                key,
                LineRange {
                    start,
                    end: self.lines.len(),
                },
            );
        }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// `(line_number, text)` pairs, 1-based.
    pub fn lines(&self) -> impl Iterator<Item = (usize, &str)> {
        self.lines.iter().enumerate().map(|(i, l)| (i + 1, l.as_str()))
    }

    pub fn line(&self, number: usize) -> Option<&str> {
        number.checked_sub(1).and_then(|i| self.lines.get(i)).map(String::as_str)
    }

    pub fn span(&self, key: &SpanKey) -> Option<LineRange> {
        self.spans.get(key).copied()
    }

    pub fn spans(&self) -> impl Iterator<Item = (&SpanKey, &LineRange)> {
        self.spans.iter()
    }

    /// Un-numbered rendering.
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }

    /// `N: <text>` per line, the form shown to the extractor.
    pub fn numbered_text(&self) -> String {
        self.lines()
            .map(|(n, l)| format!("{n}: {l}"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn check_range(&self, range: LineRange) -> Result<(), TranscriptError> {
        if range.start == 0 || range.start > range.end || range.end > self.lines.len() {
            return Err(TranscriptError::RangeOutOfBounds {
                start: range.start,
                end: range.end,
                len: self.lines.len(),
            });
        }
        Ok(())
    }

    /// Observation spans in history order.
    pub fn observation_spans(&self) -> Vec<(SpanKey, LineRange)> {
        let mut v: Vec<_> = self
            .spans
            .iter()
            .filter(|(k, _)| k.field == SpanField::Observation)
            .map(|(k, r)| (*k, *r))
            .collect();
        v.sort_by_key(|(_, r)| r.start);
        v
    }
}

/// Exact newline-joined text of lines `range.start..=range.end`.
pub fn resolve_lines(history: &LineIndexedHistory, range: LineRange) -> Result<String, TranscriptError> {
    history.check_range(range)?;
    Ok(history.lines[range.start - 1..range.end].join("\n"))
}

/// True iff `fact`, trimmed of surrounding whitespace, occurs verbatim in the
/// resolved range.
pub fn contains_verbatim(
    history: &LineIndexedHistory,
    range: LineRange,
    fact: &str,
) -> Result<bool, TranscriptError> {
    let text = resolve_lines(history, range)?;
    Ok(text.contains(fact.trim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::{Cycle, EpisodeLedger};
    use serde_json::Map;

    fn ledger_with_observation(obs: &str) -> EpisodeLedger {
        let mut l = EpisodeLedger::new();
        l.append_user("q").unwrap();
        l.append_cycle(1, Cycle::tool("look", AgentAction::tool("f", Map::new()), obs))
            .unwrap();
        l.append_cycle(1, Cycle::finish("done", "answer")).unwrap();
        l.append_user("q2").unwrap();
        l
    }

    #[test]
    fn multi_line_observation_spans_consecutive_lines() {
        let l = ledger_with_observation("a\nb\nc");
        let h = l.render_line_indexed(2);
        let (_, r) = h.observation_spans()[0];
        assert_eq!(r.len(), 3);
        assert_eq!(resolve_lines(&h, r).unwrap(), "a\nb\nc");
    }

    #[test]
    fn first_turn_history_is_empty() {
        let mut l = EpisodeLedger::new();
        l.append_user("q").unwrap();
        let h = l.render_line_indexed(1);
        assert_eq!(h.len(), 0);
        assert_eq!(h.numbered_text(), "");
    }

    #[test]
    fn single_line_range() {
        let l = ledger_with_observation("1\n2\n3\n4\n5\n6");
        let h = l.render_line_indexed(2);
        assert_eq!(resolve_lines(&h, LineRange::new(5, 5).unwrap()).unwrap(), h.line(5).unwrap());
    }

    #[test]
    fn out_of_bounds_range() {
        let l = ledger_with_observation("x");
        let h = l.render_line_indexed(2);
        let n = h.len();
        let err = resolve_lines(&h, LineRange::new(n, n + 3).unwrap()).unwrap_err();
        assert!(matches!(err, TranscriptError::RangeOutOfBounds { .. }));
    }

    #[test]
    fn numbered_text_prefixes() {
        let l = ledger_with_observation("x");
        let h = l.render_line_indexed(2);
        let first = h.numbered_text().lines().next().unwrap().to_string();
        assert_eq!(first, "1: ## Turn 1");
    }

    #[test]
    fn verbatim_rules() {
        let l = ledger_with_observation("order: O1\nprice: 42\nstatus: pending");
        let h = l.render_line_indexed(2);
        let (_, r) = h.observation_spans()[0];
        assert!(contains_verbatim(&h, r, "price: 42").unwrap());
        assert!(contains_verbatim(&h, r, "  price: 42  ").unwrap());
        assert!(!contains_verbatim(&h, r, "price: 43").unwrap());
        assert!(!contains_verbatim(&h, r, "Price: 42").unwrap());
    }

    #[test]
    fn range_constructor_rejects_inverted() {
        assert!(LineRange::new(3, 2).is_err());
        assert!(LineRange::new(0, 2).is_err());
    }
}
