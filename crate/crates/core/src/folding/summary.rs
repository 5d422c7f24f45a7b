use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::FoldError;

pub const TODO_HEADER: &str = "To-do list (The task should follow the execution order):";

static MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[\s#*>\-]*to[\s-]?do\s+list\b").expect("marker regex"));
static STEP: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:[-*]\s*)?(?:\*\*)?(?:step\s*(\d+)|(\d+))\s*[.:)](?:\*\*)?(?:\s+|$)(.*)$").expect("step regex")
});

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TodoItem {
    pub step: u32,
    pub description: String,
}

/// Narrative plus pending to-do steps for one turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub turn_index: u32,
    pub narrative: String,
    pub todo: Vec<TodoItem>,
    /// Set when the narrative is the raw dialogue view rather than a
    /// summarizer output (summarization ablated).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub raw_dialogue: bool,
}

impl Summary {
    pub fn new(turn_index: u32, narrative: impl Into<String>, steps: impl IntoIterator<Item = String>) -> Self {
        Summary {
            turn_index,
            narrative: narrative.into(),
            todo: steps
                .into_iter()
                .enumerate()
                .map(|(i, description)| TodoItem {
                    step: i as u32 + 1,
                    description,
                })
                .collect(),
            raw_dialogue: false,
        }
    }

    pub fn raw(turn_index: u32, dialogue: String) -> Self {
        Summary {
            turn_index,
            narrative: dialogue,
            todo: Vec::new(),
            raw_dialogue: true,
        }
    }

    /// Narrative, blank line, to-do header, one `StepN.` line per item.
    /// [`parse_summary`] inverts this.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.narrative);
        out.push_str("\n\n");
        out.push_str(TODO_HEADER);
        for item in &self.todo {
            out.push_str(&format!("\nStep{}. {}", item.step, item.description));
        }
        out
    }
}

/// Parses summarizer output: narrative before the to-do marker, then
/// `StepN.` / `N.` items in order. Unprefixed lines after a step continue
/// it; steps are renumbered 1..n in order of appearance.
pub fn parse_summary(raw: &str, turn_index: u32) -> Result<Summary, FoldError> {
    let lines: Vec<&str> = raw.lines().collect();
    let marker = lines
        .iter()
        .position(|l| MARKER.is_match(l))
        .ok_or(FoldError::MissingTodoMarker)?;
    let narrative = lines[..marker].join("\n").trim().to_string();

    let mut steps: Vec<String> = Vec::new();
    // the marker line may carry the first step inline after its colon
    let tail = lines[marker].split_once(':').map(|(_, t)| t.trim()).unwrap_or_default();
    let body = std::iter::once(tail).chain(lines[marker + 1..].iter().copied());
    for line in body {
        let t = line.trim();
        if t.is_empty() || t.chars().all(|c| c == '.' || c == '…') {
            continue;
        }
        if let Some(c) = STEP.captures(t) {
            steps.push(c.get(3).map_or("", |m| m.as_str()).trim().to_string());
        } else if let Some(last) = steps.last_mut() {
            if !last.is_empty() {
                last.push(' ');
            }
            last.push_str(t);
        }
    }
    steps.retain(|s| !s.is_empty());
    Ok(Summary::new(turn_index, narrative, steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_example() {
        let s = parse_summary(
            "All done so far.\nTo-do list...:\nStep1. Verify order O1\nStep2. Refund O1",
            3,
        )
        .unwrap();
        assert_eq!(s.narrative, "All done so far.");
        assert_eq!(
            s.todo,
            vec![
                TodoItem {
                    step: 1,
                    description: "Verify order O1".into()
                },
                TodoItem {
                    step: 2,
                    description: "Refund O1".into()
                },
            ]
        );
        assert_eq!(s.turn_index, 3);
    }

    #[test]
    fn marker_without_steps() {
        let s = parse_summary("Nothing pending.\n\nTo-do list (The task should follow the execution order):\n", 1).unwrap();
        assert!(s.todo.is_empty());
    }

    #[test]
    fn missing_marker() {
        assert!(matches!(parse_summary("just prose", 1), Err(FoldError::MissingTodoMarker)));
    }

    #[test]
    fn accepts_numbered_and_lowercase_steps() {
        let s = parse_summary("n\nTo-do list:\n1. first\n  step2. second\n   continues here\n3) third", 1).unwrap();
        let d: Vec<_> = s.todo.iter().map(|t| t.description.as_str()).collect();
        assert_eq!(d, ["first", "second continues here", "third"]);
        assert_eq!(s.todo[2].step, 3);
    }

    #[test]
    fn decimal_numbers_are_not_steps() {
        let s = parse_summary("n\nTo-do list:\nStep1. weigh\n3.5 kg maximum", 1).unwrap();
        assert_eq!(s.todo.len(), 1);
        assert_eq!(s.todo[0].description, "weigh 3.5 kg maximum");
    }

    #[test]
    fn template_style_indentation() {
        let raw = "Story.\n\nTo-do list (The task should follow the execution order):\n\n    Step1. Task 1\n    \n    Step2. Task 2\n    \n    ...";
        let s = parse_summary(raw, 1).unwrap();
        assert_eq!(s.todo.len(), 2);
    }

    #[test]
    fn render_parse_round_trip() {
        let s = Summary::new(2, "User wants a refund for O1.", vec!["Verify O1".to_string(), "Refund O1".to_string()]);
        assert_eq!(parse_summary(&s.render(), 2).unwrap(), s);
    }
}
