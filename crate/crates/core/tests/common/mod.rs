//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use ctxfold_core::backend::{ChatBackend, ChatRequest, FnBackend, MessageRole, ModelRole, RoleRouter};
use ctxfold_core::environment::Domain;
use ctxfold_core::transcript::{AgentAction, Cycle, EpisodeLedger};
use proptest::prelude::*;
use serde_json::{json, Map, Value};

pub const NARRATIVE: &str = "The user is reviewing archived records.";
pub const LOSSY_SUMMARY: &str = "The user is reviewing archived records.\nTo-do list (The task should follow the execution order):\nStep1. Review the requested records\nStep2. Answer the user";
pub const PLANTED_CODE: &str = "AC-7731-QZ";
pub const PLANTED_ID: &str = "R-PLANT";
pub const GROWTH_TURNS: u32 = 12;
pub const REVIEWS_PER_TURN: u32 = 3;
/// Body length that makes a clean record observation about 2,000 chars.
const BODY_CHARS: usize = 1925;

fn body(id: &str) -> String {
    let mut s = String::new();
    let mut i = 0u64;
    while s.len() < BODY_CHARS {
        // cheap deterministic word stream so no two records share text
        let h = (i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.bytes().fold(7u64, |a, b| a * 31 + b as u64);
        s.push_str(&format!("{:x} ", h % 0xFF_FFFF));
        i += 1;
    }
    s.truncate(BODY_CHARS);
    s
}

fn record(id: &str) -> Value {
    json!({"record_id": id, "title": format!("Archived record {id}"), "status": "archived", "body": body(id)})
}

fn review_turn(t: u32) -> String {
    let ids: Vec<String> = (1..=REVIEWS_PER_TURN).map(|c| format!("R{t}-{c}")).collect();
    format!("Turn {t}: please review records {}.", ids.join(", "))
}

/// A synthetic domain with large record documents.
///
/// - `growth`: 12 review turns of 3 lookups each; the last turn also closes R1-1.
/// - `plant`: a code is read at turn 1 and asked for at turn 6.
/// - `short`: 3 review turns of 2 lookups each.
pub fn records_domain() -> Domain {
    let mut records = Map::new();
    for t in 1..=GROWTH_TURNS {
        for c in 1..=REVIEWS_PER_TURN {
            let id = format!("R{t}-{c}");
            records.insert(id.clone(), record(&id));
        }
    }
    let mut plant = record(PLANTED_ID);
    plant["access_code"] = json!(PLANTED_CODE);
    records.insert(PLANTED_ID.into(), plant);

    let mut growth: Vec<String> = (1..GROWTH_TURNS).map(review_turn).collect();
    growth.push(format!("{} Then close record R1-1.", review_turn(GROWTH_TURNS)));
    growth.push("Thanks, that is all. ###DONE###".into());

    let mut plant_turns = vec![format!("Please look up record {PLANTED_ID}.")];
    plant_turns.extend((2..=5).map(|t| format!("Turn {t}: just checking in, anything new?")));
    plant_turns.push(format!("What is the access code of record {PLANTED_ID}?"));
    plant_turns.push("###DONE###".into());

    let short: Vec<String> = (1..=3)
        .map(|t| format!("Turn {t}: please review records R{t}-1, R{t}-2."))
        .chain(["###DONE###".to_string()])
        .collect();

    let unchanged = json!({"collection": "records", "id": PLANTED_ID, "field": "status", "value": "archived"});
    let doc = json!({
        "format_version": 1,
        "domain": "records",
        "policy": "You manage an archive of records. Look records up with the tools before answering.",
        "tools": [
            {
                "name": "get_record",
                "description": "Get an archived record.",
                "parameters": {"record_id": {"type": "string", "required": true, "description": "Record id."}},
                "effect": {"kind": "get", "collection": "records", "id_param": "record_id"}
            },
            {
                "name": "set_status",
                "description": "Set the status of a record.",
                "parameters": {
                    "record_id": {"type": "string", "required": true, "description": "Record id."},
                    "status": {"type": "string", "required": true, "description": "New status."}
                },
                "effect": {"kind": "update", "collection": "records", "id_param": "record_id",
                           "set": {"status": {"param": "status"}}}
            }
        ],
        "initial_state": {"records": records},
        "tasks": [
            {"task_id": "growth", "user_scenario": {"mode": "scripted", "turns": growth},
             "goal": {"equals": [{"collection": "records", "id": "R1-1", "field": "status", "value": "closed"}],
                      "forbidden": []}},
            {"task_id": "plant", "user_scenario": {"mode": "scripted", "turns": plant_turns},
             "goal": {"equals": [unchanged], "forbidden": [{"collection": "records"}]}},
            {"task_id": "short", "user_scenario": {"mode": "scripted", "turns": short},
             "goal": {"equals": [unchanged], "forbidden": [{"collection": "records"}]}}
        ]
    });
    Domain::from_json(&doc.to_string()).expect("records domain is valid")
}

pub fn act(name: &str, params: Value) -> String {
    format!(
        "<inner>\nnext step\n</inner>\n<action>\n{}\n</action>",
        json!({"action": name, "parameters": params})
    )
}

pub fn fin(text: &str) -> String {
    format!("<inner>\ndone\n</inner>\n<final>\n{text}\n</final>")
}

/// The current query and the number of observations that follow it.
pub fn current_query(req: &ChatRequest) -> (String, usize) {
    let mut n = 0;
    for m in req.messages.iter().rev() {
        if m.role != MessageRole::User {
            continue;
        }
        if m.content.starts_with("<observation>") {
            n += 1;
        } else {
            return (m.content.clone(), n);
        }
    }
    (String::new(), n)
}

fn ids_in(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == ',' || c == '.' || c == '?')
        .filter(|w| w.starts_with('R') && w.contains('-'))
        .map(str::to_string)
        .collect()
}

/// Deterministic agent for the records domain; identical for every strategy.
pub fn records_agent(req: &ChatRequest) -> String {
    let (query, n) = current_query(req);
    if query.contains("access code") {
        if req.prompt_text().contains(PLANTED_CODE) {
            return fin(&format!("The access code is {PLANTED_CODE}."));
        }
        if n == 0 {
            return act("get_record", json!({"record_id": PLANTED_ID}));
        }
        return fin("I could not find the code.");
    }
    let (review, close) = match query.split_once("Then close record") {
        Some((r, c)) => (ids_in(r), ids_in(c).into_iter().next()),
        None => (ids_in(&query), None),
    };
    if n < review.len() {
        return act("get_record", json!({"record_id": review[n]}));
    }
    if let Some(id) = close {
        if n == review.len() {
            return act("set_status", json!({"record_id": id, "status": "closed"}));
        }
    }
    if review.is_empty() && n == 0 {
        return fin("Nothing new on my side.");
    }
    fin("Done, the records are reviewed.")
}

/// Cites the line holding the planted code, or else the most recent
/// record id line.
pub fn faithful_extractor(req: &ChatRequest) -> String {
    let text = req.prompt_text();
    let numbered: Vec<(usize, &str)> = text
        .lines()
        .filter_map(|l| {
            let (n, rest) = l.split_once(": ")?;
            Some((n.parse().ok()?, rest))
        })
        .collect();
    let pick = numbered
        .iter()
        .find(|(_, l)| l.contains(PLANTED_CODE))
        .map(|(n, _)| (*n, PLANTED_CODE.to_string()))
        .or_else(|| {
            numbered.iter().rev().find(|(_, l)| l.contains("\"record_id\"")).map(|(n, l)| {
                let id = l.split('"').nth(3).unwrap_or_default().to_string();
                (*n, id)
            })
        });
    match pick {
        Some((n, fact)) => format!(
            "- Summary: record data\n- Original: Lines: {n}-{n}\n- Facts:\n    - {fact}\n- Constraints:\n    - none\n- Hint: reuse the cited value\n"
        ),
        None => String::new(),
    }
}

pub fn fn_backend(label: &str, f: fn(&ChatRequest) -> String) -> Arc<dyn ChatBackend> {
    Arc::new(FnBackend::new(label, move |_, req| Ok(f(req))))
}

pub fn records_router() -> RoleRouter {
    RoleRouter::new()
        .route(ModelRole::Agent, fn_backend("agent", records_agent), "agent")
        .route(ModelRole::Summarizer, fn_backend("folder", |_| LOSSY_SUMMARY.into()), "folder")
        .route(ModelRole::Extractor, fn_backend("folder", faithful_extractor), "folder")
        .route(ModelRole::UserSim, fn_backend("user", |_| "###DONE###".into()), "user")
}

// ----- ledger generators -----

#[derive(Debug, Clone)]
pub struct ToolStep {
    pub thought: String,
    pub tool: String,
    pub params: Map<String, Value>,
    pub observation: String,
}

#[derive(Debug, Clone)]
pub struct TurnSpec {
    pub query: String,
    pub steps: Vec<ToolStep>,
    pub final_thought: String,
    pub final_text: String,
}

fn word() -> impl Strategy<Value = String> {
    "[a-z0-9]{1,10}"
}

fn line() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..8).prop_map(|w| w.join(" "))
}

fn multiline(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(line(), 1..max).prop_map(|l| l.join("\n"))
}

fn params() -> impl Strategy<Value = Map<String, Value>> {
    prop::collection::btree_map(
        "[a-z_]{1,8}",
        prop_oneof![word().prop_map(Value::String), any::<i32>().prop_map(|i| json!(i))],
        0..4,
    )
    .prop_map(|m| m.into_iter().collect())
}

fn tool_step() -> impl Strategy<Value = ToolStep> {
    (line(), "[a-z_]{1,12}", params(), multiline(6)).prop_map(|(thought, tool, params, observation)| ToolStep {
        thought,
        tool,
        params,
        observation,
    })
}

fn turn() -> impl Strategy<Value = TurnSpec> {
    (
        "[a-z][a-z0-9 ]{0,30}",
        prop::collection::vec(tool_step(), 0..4),
        line(),
        "[a-z][a-z0-9 ]{0,30}",
    )
        .prop_map(|(query, steps, final_thought, final_text)| TurnSpec {
            query,
            steps,
            final_thought,
            final_text,
        })
}

pub fn ledger_spec() -> impl Strategy<Value = Vec<TurnSpec>> {
    prop::collection::vec(turn(), 1..5)
}

/// All turns closed, then one open turn so every trajectory is "prior".
pub fn build_ledger(spec: &[TurnSpec]) -> EpisodeLedger {
    let mut l = EpisodeLedger::new();
    for (i, t) in spec.iter().enumerate() {
        let turn = i as u32 + 1;
        l.append_user(t.query.clone()).unwrap();
        for s in &t.steps {
            let action = AgentAction::tool(s.tool.clone(), s.params.clone());
            l.append_cycle(turn, Cycle::tool(s.thought.clone(), action, s.observation.clone()))
                .unwrap();
        }
        l.append_cycle(turn, Cycle::finish(t.final_thought.clone(), t.final_text.clone()))
            .unwrap();
    }
    l.append_user("next").unwrap();
    l
}

/// Expected physical lines of the numbered history, built from the generated turns
/// rather than from the ledger.
pub fn oracle_lines(spec: &[TurnSpec]) -> Vec<String> {
    let mut text = Vec::new();
    for (i, t) in spec.iter().enumerate() {
        let turn = i + 1;
        text.push(format!("## Turn {turn}"));
        for (j, s) in t.steps.iter().enumerate() {
            let c = j + 1;
            let doc = json!({"action": s.tool, "parameters": s.params});
            text.push(format!("Thought {turn}.{c}: {}", s.thought));
            text.push(format!("Action {turn}.{c}: {doc}"));
            text.push(format!("Observation {turn}.{c}:"));
            text.push(s.observation.clone());
        }
        let c = t.steps.len() + 1;
        text.push(format!("Thought {turn}.{c}: {}", t.final_thought));
        text.push(format!("Final {turn}.{c}: {}", t.final_text));
    }
    text.join("\n").split('\n').map(str::to_string).collect()
}

/// Substring search by explicit window comparison.
pub fn naive_contains(hay: &str, needle: &str) -> bool {
    let (h, n) = (hay.as_bytes(), needle.as_bytes());
    if n.is_empty() {
        return true;
    }
    (0..h.len().saturating_sub(n.len() - 1)).any(|i| &h[i..i + n.len()] == n)
}
