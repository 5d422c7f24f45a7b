use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::environment::ToolInvocation;
use crate::transcript::action_json;

static TRAILING_COMMA: LazyLock<Regex> = LazyLock::new(|| Regex::new(r",(\s*[}\]])").expect("comma regex"));

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentOutputError {
    #[error("empty model output")]
    EmptyOutput,
    #[error("output has neither an <action> nor a <final> block")]
    MissingBlock,
    #[error("output has both an <action> and a <final> block")]
    BothBlocksPresent,
    #[error("<action> body is not a valid action document: {0}")]
    MalformedActionJson(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentPayload {
    ToolInvocation(ToolInvocation),
    Final { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAgentOutput {
    pub inner: String,
    /// The model left out the `<inner>` block.
    pub inner_missing: bool,
    pub payload: AgentPayload,
}

/// Body of the first `<tag>...</tag>` pair. An unclosed tag runs to the end.
fn block<'a>(raw: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = raw.find(&open)? + open.len();
    let rest = &raw[start..];
    Some(rest.find(&close).map_or(rest, |end| &rest[..end]))
}

fn strip_fence(s: &str) -> &str {
    let s = s.trim();
    let Some(body) = s.strip_prefix("```") else {
        return s;
    };
    let body = body.strip_prefix("json").unwrap_or(body);
    body.strip_suffix("```").unwrap_or(body).trim()
}

/// Parses an action document, tolerating the trailing commas of the
/// template's own format sketch and a markdown code fence.
pub fn parse_action_json(body: &str) -> Result<ToolInvocation, AgentOutputError> {
    let text = strip_fence(body);
    let doc: Value = serde_json::from_str(text)
        .or_else(|_| serde_json::from_str(&TRAILING_COMMA.replace_all(text, "$1")))
        .map_err(|e| AgentOutputError::MalformedActionJson(e.to_string()))?;
    let name = doc
        .get("action")
        .and_then(Value::as_str)
        .ok_or_else(|| AgentOutputError::MalformedActionJson("missing string field \"action\"".into()))?;
    let parameters = doc
        .get("parameters")
        .and_then(Value::as_object)
        .ok_or_else(|| AgentOutputError::MalformedActionJson("missing object field \"parameters\"".into()))?;
    Ok(ToolInvocation {
        name: name.to_string(),
        parameters: parameters.clone(),
    })
}

pub fn parse_agent_output(raw: &str) -> Result<ParsedAgentOutput, AgentOutputError> {
    if raw.trim().is_empty() {
        return Err(AgentOutputError::EmptyOutput);
    }
    let inner = block(raw, "inner");
    // blocks are searched after the thought so tags quoted inside it are ignored
    let rest = match raw.find("</inner>") {
        Some(i) if inner.is_some() => &raw[i + "</inner>".len()..],
        _ => raw,
    };
    let action = block(rest, "action");
    let fin = block(rest, "final");
    let payload = match (action, fin) {
        (Some(_), Some(_)) => return Err(AgentOutputError::BothBlocksPresent),
        (None, None) => return Err(AgentOutputError::MissingBlock),
        (Some(body), None) => AgentPayload::ToolInvocation(parse_action_json(body)?),
        (None, Some(text)) => AgentPayload::Final {
            text: text.trim().to_string(),
        },
    };
    Ok(ParsedAgentOutput {
        inner: inner.map(str::trim).unwrap_or_default().to_string(),
        inner_missing: inner.is_none(),
        payload,
    })
}

pub fn render_action_block(name: &str, parameters: &Map<String, Value>) -> String {
    format!("<action>\n{}\n</action>", action_json(name, parameters))
}

/// Canonical text form of an agent output; [`parse_agent_output`] reads it
/// back to an equal value.
pub fn render_agent_output(out: &ParsedAgentOutput) -> String {
    let head = format!("<inner>\n{}\n</inner>\n", out.inner);
    match &out.payload {
        AgentPayload::ToolInvocation(call) => head + &render_action_block(&call.name, &call.parameters),
        AgentPayload::Final { text } => format!("{head}<final>\n{text}\n</final>"),
    }
}
