use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::FoldError;
use crate::transcript::{contains_verbatim, LineIndexedHistory, LineRange};

static LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[-*•]\s*)?(?:\d+[.)]\s*)?(?:#+\s*)?(?:\*\*)?(summary|original|facts|constraints|hint)(?:\*\*)?\s*:(?:\*\*)?\s?(.*)$",
    )
    .expect("label regex")
});
static LINES: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)lines?\s*:?\s*(\d+)(?:\s*[-–]\s*(\d+))?").expect("lines regex"));
static BULLET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:[-*•]|\d+[.)])\s+").expect("bullet regex"));

/// One extracted unit of past tool output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub block_summary: String,
    pub range: LineRange,
    pub facts: Vec<String>,
    pub constraints: Vec<String>,
    pub hint: String,
    /// Parallel to `facts`: whether each fact occurs verbatim in `range`.
    pub verbatim_ok: Vec<bool>,
}

impl ContextBlock {
    pub fn all_verbatim(&self) -> bool {
        self.verbatim_ok.iter().all(|ok| *ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Summary,
    Original,
    Facts,
    Constraints,
    Hint,
}

impl Field {
    fn from_label(s: &str) -> Field {
        match s.to_ascii_lowercase().as_str() {
            "summary" => Field::Summary,
            "original" => Field::Original,
            "facts" => Field::Facts,
            "constraints" => Field::Constraints,
            _ => Field::Hint,
        }
    }
}

#[derive(Default)]
struct RawBlock {
    fields: Vec<(Field, Vec<String>)>,
}

impl RawBlock {
    fn has(&self, f: Field) -> bool {
        self.fields.iter().any(|(g, _)| *g == f)
    }

    fn text(&self, f: Field) -> Option<String> {
        self.fields
            .iter()
            .find(|(g, _)| *g == f)
            .map(|(_, lines)| lines.join("\n").trim().to_string())
    }

    fn items(&self, f: Field) -> Vec<String> {
        let Some((_, lines)) = self.fields.iter().find(|(g, _)| *g == f) else {
            return Vec::new();
        };
        let mut items: Vec<String> = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(m) = BULLET.find(line) {
                items.push(line[m.end()..].to_string());
            } else if i == 0 || items.is_empty() {
                items.push(line.to_string());
            } else if let Some(last) = items.last_mut() {
                // unbulleted lines continue a multi-line verbatim excerpt
                last.push('\n');
                last.push_str(line);
            }
        }
        items
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty() && !is_none_marker(s))
            .collect()
    }
}

fn is_none_marker(s: &str) -> bool {
    matches!(
        s.trim_end_matches('.').to_ascii_lowercase().as_str(),
        "none" | "n/a" | "-" | "no constraints" | "none stated"
    )
}

fn split_blocks(raw: &str) -> Vec<RawBlock> {
    let mut blocks: Vec<RawBlock> = Vec::new();
    let mut current: Option<RawBlock> = None;
    for line in raw.lines() {
        if let Some(c) = LABEL.captures(line) {
            let field = Field::from_label(&c[1]);
            let rest = c.get(2).map_or("", |m| m.as_str()).to_string();
            let start_new = match &current {
                None => true,
                Some(b) => field == Field::Summary && !b.fields.is_empty() || b.has(field),
            };
            if start_new {
                if let Some(b) = current.take() {
                    blocks.push(b);
                }
                current = Some(RawBlock::default());
            }
            let b = current.as_mut().expect("block started");
            b.fields.push((field, if rest.trim().is_empty() { Vec::new() } else { vec![rest] }));
        } else if let Some(b) = current.as_mut() {
            if let Some((_, lines)) = b.fields.last_mut() {
                lines.push(line.to_string());
            }
        }
    }
    if let Some(b) = current {
        blocks.push(b);
    }
    blocks
}

fn parse_range(text: &str) -> Option<(usize, usize)> {
    let c = LINES.captures(text)?;
    let start: usize = c[1].parse().ok()?;
    let end: usize = c.get(2).map_or(Some(start), |m| m.as_str().parse().ok())?;
    Some((start, end))
}

/// Parses extractor output into blocks validated against `history`.
/// Whitespace-only output, or output without any field labels, yields no
/// blocks.
pub fn parse_extraction(raw: &str, history: &LineIndexedHistory) -> Result<Vec<ContextBlock>, FoldError> {
    let mut out = Vec::new();
    for (i, b) in split_blocks(raw).into_iter().enumerate() {
        let original = b.text(Field::Original).unwrap_or_default();
        let (start, end) = parse_range(&original).ok_or_else(|| FoldError::MalformedBlock {
            block: i + 1,
            reason: "missing \"Lines: <start>-<end>\"".into(),
        })?;
        let range = LineRange::new(start, end).map_err(|_| FoldError::MalformedBlock {
            block: i + 1,
            reason: format!("invalid line range {start}-{end}"),
        })?;
        history.check_range(range).map_err(FoldError::RangeOutOfBounds)?;
        let facts = b.items(Field::Facts);
        let verbatim_ok = facts
            .iter()
            .map(|f| contains_verbatim(history, range, f))
            .collect::<Result<Vec<_>, _>>()
            .map_err(FoldError::RangeOutOfBounds)?;
        out.push(ContextBlock {
            block_summary: b.text(Field::Summary).unwrap_or_default(),
            range,
            facts,
            constraints: b.items(Field::Constraints),
            hint: b.text(Field::Hint).unwrap_or_default(),
            verbatim_ok,
        });
    }
    Ok(out)
}

/// Renders blocks in the extractor's output format; [`parse_extraction`]
/// reads this back.
pub fn render_blocks(blocks: &[ContextBlock]) -> String {
    let mut out = String::new();
    for b in blocks {
        out.push_str(&format!("- Summary: {}\n", b.block_summary));
        out.push_str(&format!("- Original: {}\n", b.range));
        out.push_str("- Facts:\n");
        for f in &b.facts {
            out.push_str(&format!("    - {f}\n"));
        }
        out.push_str("- Constraints:\n");
        for c in &b.constraints {
            out.push_str(&format!("    - {c}\n"));
        }
        out.push_str(&format!("- Hint: {}\n\n", b.hint));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::{AgentAction, Cycle, EpisodeLedger};
    use serde_json::Map;

    /// History whose observation holds lines "v1".."v6" (total 10 lines).
    fn ten_line_history() -> LineIndexedHistory {
        let mut l = EpisodeLedger::new();
        l.append_user("q").unwrap();
        let obs = (1..=6).map(|i| format!("v{i}")).collect::<Vec<_>>().join("\n");
        l.append_cycle(1, Cycle::tool("look", AgentAction::tool("f", Map::new()), obs))
            .unwrap();
        l.append_cycle(1, Cycle::finish("t", "r")).unwrap();
        l.append_user("q2").unwrap();
        let h = l.render_line_indexed(2);
        assert_eq!(h.len(), 12);
        h
    }

    #[test]
    fn single_line_block_with_verbatim_fact() {
        let h = ten_line_history();
        let line5 = h.line(5).unwrap().to_string();
        let raw = format!("- Summary: s\n- Original: Lines: 5-5\n- Facts:\n    - {line5}\n- Constraints:\n- Hint: h\n");
        let blocks = parse_extraction(&raw, &h).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].range, LineRange::new(5, 5).unwrap());
        assert_eq!(blocks[0].verbatim_ok, vec![true]);
        assert!(blocks[0].constraints.is_empty());
    }

    #[test]
    fn empty_output_is_no_blocks() {
        let h = ten_line_history();
        assert!(parse_extraction("", &h).unwrap().is_empty());
        assert!(parse_extraction("  \n\t\n", &h).unwrap().is_empty());
        assert!(parse_extraction("Nothing is relevant.", &h).unwrap().is_empty());
    }

    #[test]
    fn out_of_bounds_block() {
        let h = ten_line_history();
        let err = parse_extraction("Summary: s\nOriginal: Lines: 40-42\n", &h).unwrap_err();
        assert!(matches!(err, FoldError::RangeOutOfBounds(_)));
    }

    #[test]
    fn missing_lines_is_malformed() {
        let h = ten_line_history();
        let err = parse_extraction("Summary: s\nFacts:\n- v1\n", &h).unwrap_err();
        assert!(matches!(err, FoldError::MalformedBlock { block: 1, .. }));
    }

    #[test]
    fn markdown_decorated_fields_and_multiple_blocks() {
        let h = ten_line_history();
        let raw = "1. **Summary:** first\n**Original:** Lines: 5-6\n**Facts:**\n- v1\n- v9\n**Hint:** go\n\n2. **Summary:** second\n**Original:** Lines: 7-7\n**Constraints:** none\n";
        let blocks = parse_extraction(raw, &h).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].facts, vec!["v1", "v9"]);
        assert_eq!(blocks[0].verbatim_ok, vec![true, false]);
        assert_eq!(blocks[0].hint, "go");
        assert_eq!(blocks[1].range.start, 7);
        assert!(blocks[1].constraints.is_empty());
    }

    #[test]
    fn bare_single_line_number_accepted() {
        let h = ten_line_history();
        let blocks = parse_extraction("Summary: s\nOriginal: Lines: 6\n", &h).unwrap();
        assert_eq!(blocks[0].range, LineRange::new(6, 6).unwrap());
    }

    #[test]
    fn render_then_parse_preserves_blocks() {
        let h = ten_line_history();
        let b = ContextBlock {
            block_summary: "order info".into(),
            range: LineRange::new(5, 7).unwrap(),
            facts: vec!["v1".into(), "v2".into()],
            constraints: vec!["only pending orders can be cancelled".into()],
            hint: "use get_order".into(),
            verbatim_ok: vec![true, true],
        };
        let parsed = parse_extraction(&render_blocks(std::slice::from_ref(&b)), &h).unwrap();
        assert_eq!(parsed, vec![b]);
    }
}
