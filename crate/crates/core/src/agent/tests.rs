use std::sync::Arc;

use serde_json::{json, Value};

use super::*;
use crate::backend::{ChatBackend, Condition, FnBackend, ScriptedBackend, ScriptedRule};
use crate::environment::UserScenario;

const SUMMARY: &str = "User wants help.\nTo-do list (The task should follow the execution order):\nStep1. Help the user";

fn act(name: &str, params: Value) -> String {
    format!(
        "<inner>\nnext step\n</inner>\n<action>\n{}\n</action>",
        json!({"action": name, "parameters": params})
    )
}

fn fin(text: &str) -> String {
    format!("<inner>\ndone\n</inner>\n<final>\n{text}\n</final>")
}

fn scripted(rules: Vec<ScriptedRule>) -> Arc<dyn ChatBackend> {
    Arc::new(ScriptedBackend::new(rules).unwrap())
}

fn router(agent: Vec<ScriptedRule>) -> RoleRouter {
    RoleRouter::new()
        .route(ModelRole::Agent, scripted(agent), "agent-model")
        .route(ModelRole::Summarizer, scripted(vec![ScriptedRule::always(SUMMARY)]), "folder")
        .route(ModelRole::Extractor, scripted(vec![ScriptedRule::always("")]), "folder")
        .route(
            ModelRole::UserSim,
            scripted(vec![ScriptedRule::always("tell me more")]),
            "user",
        )
}

fn retail() -> Domain {
    Domain::builtin("retail").unwrap()
}

fn session(d: &Domain) -> Session {
    Session::new(d, d.initial_world(), NoiseConfig::off(), "ep", Clock::Logical)
}

fn config(strategy: StrategyKind) -> AgentConfig {
    AgentConfig {
        strategy,
        ..AgentConfig::default()
    }
}

fn scripted_task(lines: &[&str]) -> TaskSpec {
    let mut t = retail().tasks[0].clone();
    t.user_scenario = UserScenario::Scripted {
        turns: lines.iter().map(|s| s.to_string()).collect(),
        alternates: Vec::new(),
    };
    t
}

#[tokio::test]
async fn one_tool_call_then_final() {
    let d = retail();
    let r = router(vec![
        ScriptedRule::when(vec![Condition::contains("<observation>").in_last()], fin("O1 is pending.")),
        ScriptedRule::always(act("get_order_details", json!({"order_id": "O1"}))),
    ]);
    let t = PromptTemplates::builtin();
    let cfg = config(StrategyKind::UFold);
    let mut s = session(&d);
    let report = Agent::new(&t, &r, &cfg).run_turn(&mut s, "status of O1?").await.unwrap();
    let traj = s.ledger.trajectory(1).unwrap();
    assert_eq!(traj.cycles.len(), 2);
    assert!(traj.is_closed());
    assert_eq!(report.final_text, "O1 is pending.");
    assert!(traj.cycles[0].observation.as_deref().unwrap().contains("\"order_id\": \"O1\""));
    assert_eq!(s.metrics.tool_call_count, 1);
}

#[tokio::test]
async fn malformed_once_then_final_is_repaired() {
    let d = retail();
    let r = router(vec![
        ScriptedRule::when(vec![Condition::contains("Format error").in_last()], fin("ok")),
        ScriptedRule::always("<inner>x</inner><action>{not json}</action>"),
    ]);
    let t = PromptTemplates::builtin();
    let cfg = AgentConfig {
        repair_retries: 1,
        ..config(StrategyKind::UFold)
    };
    let mut s = session(&d);
    let report = Agent::new(&t, &r, &cfg).run_turn(&mut s, "hi").await.unwrap();
    assert_eq!(s.ledger.trajectory(1).unwrap().cycles.len(), 2);
    assert!(!report.protocol_failure);
    assert_eq!(s.metrics.tool_call_count, 0);
    assert_eq!(s.metrics.repair_cycles, 1);
}

#[tokio::test]
async fn repair_exhaustion_force_closes() {
    let d = retail();
    let r = router(vec![ScriptedRule::always("no tags at all")]);
    let t = PromptTemplates::builtin();
    let cfg = AgentConfig {
        repair_retries: 1,
        ..config(StrategyKind::FullContextReact)
    };
    let mut s = session(&d);
    let report = Agent::new(&t, &r, &cfg).run_turn(&mut s, "hi").await.unwrap();
    assert!(report.protocol_failure);
    assert_eq!(report.final_text, FORCED_FINAL);
    let traj = s.ledger.trajectory(1).unwrap();
    assert!(traj.protocol_failure);
    assert_eq!(report.agent_calls, 2);
}

#[tokio::test]
async fn cycle_cap_bounds_agent_calls() {
    let d = retail();
    let r = router(vec![ScriptedRule::always(act("get_order_details", json!({"order_id": "O1"})))]);
    let t = PromptTemplates::builtin();
    let cfg = AgentConfig {
        max_cycles_per_turn: 3,
        ..config(StrategyKind::UFold)
    };
    let mut s = session(&d);
    let report = Agent::new(&t, &r, &cfg).run_turn(&mut s, "loop").await.unwrap();
    assert_eq!(report.agent_calls, 3);
    assert_eq!(r.calls_for(ModelRole::Agent).len(), 3);
    assert!(report.protocol_failure);
    assert_eq!(s.metrics.repeated_tool_call_count, 2);
}

#[tokio::test]
async fn sentinel_after_first_turn_ends_episode() {
    let d = retail();
    let r = router(vec![ScriptedRule::always(fin("sure"))]);
    let t = PromptTemplates::builtin();
    let cfg = config(StrategyKind::UFold);
    let task = scripted_task(&["hello", "###DONE###"]);
    let rec = Agent::new(&t, &r, &cfg)
        .run_episode(&d, &task, 0, NoiseConfig::off(), "e1", Clock::Logical)
        .await;
    assert_eq!(rec.turns, 1);
    assert_eq!(rec.failure_cause, None);
    assert!(rec.ledger.terminated);
    assert_eq!(rec.metrics.turn_prompt_tokens.len(), 1);
}

#[tokio::test]
async fn turn_cap_with_endless_user() {
    let d = retail();
    let r = router(vec![ScriptedRule::always(fin("sure"))]);
    let t = PromptTemplates::builtin();
    let cfg = AgentConfig {
        max_turns: 2,
        ..config(StrategyKind::FullContextReact)
    };
    let mut task = retail().tasks[0].clone();
    task.user_scenario = UserScenario::Llm {
        instructions: "never stop".into(),
    };
    let rec = Agent::new(&t, &r, &cfg)
        .run_episode(&d, &task, 0, NoiseConfig::off(), "e2", Clock::Logical)
        .await;
    assert_eq!(rec.turns, 2);
    assert_eq!(rec.failure_cause, Some(FailureCause::TurnCap));
    assert!(!rec.failed());
    assert_eq!(r.calls_for(ModelRole::UserSim).len(), 2);
}

#[tokio::test]
async fn exhausted_script_is_tagged_not_fatal() {
    let d = retail();
    let r = router(vec![ScriptedRule::always(fin("sure"))]);
    let t = PromptTemplates::builtin();
    let cfg = config(StrategyKind::UFold);
    let mut task = scripted_task(&["hello", "###DONE###"]);
    task.user_scenario = UserScenario::Scripted {
        turns: vec!["hello".into()],
        alternates: Vec::new(),
    };
    let rec = Agent::new(&t, &r, &cfg)
        .run_episode(&d, &task, 0, NoiseConfig::off(), "e3", Clock::Logical)
        .await;
    assert_eq!(rec.failure_cause, Some(FailureCause::ScriptExhausted));
    assert!(!rec.failed());
}

/// Agent that solves retail-008 by looking at the latest message only.
pub(crate) fn retail_solver() -> Vec<ScriptedRule> {
    vec![
        ScriptedRule::when(vec![Condition::contains("cancel_reason").in_last()], fin("Order O9 is cancelled.")),
        ScriptedRule::when(
            vec![Condition::contains("\"O9\"").in_last()],
            act("cancel_pending_order", json!({"order_id": "O9", "reason": "ordered by mistake"})),
        ),
        ScriptedRule::when(
            vec![Condition::contains("\"user_id\": \"U5\"").in_last()],
            act("list_orders_by_user", json!({"user_id": "U5"})),
        ),
        ScriptedRule::when(
            vec![Condition::contains("esra.demir").in_last()],
            act("find_user_id_by_email", json!({"email": "esra.demir@example.com"})),
        ),
        ScriptedRule::always(fin("Anything else?")),
    ]
}

#[tokio::test]
async fn scripted_agent_solves_retail_task() {
    let d = retail();
    let task = d.task("retail-008").unwrap().clone();
    let t = PromptTemplates::builtin();
    for strategy in StrategyKind::ALL {
        let r = router(retail_solver());
        let cfg = config(strategy);
        let rec = Agent::new(&t, &r, &cfg)
            .run_episode(&d, &task, 0, NoiseConfig::off(), "e4", Clock::Logical)
            .await;
        assert_eq!(rec.reward, 1.0, "{strategy}: {:?}", rec.failure_detail);
        assert_eq!(rec.metrics.tool_call_count, 3);
        assert_eq!(rec.mutations.len(), 1);
    }
}

#[tokio::test]
async fn overflow_fails_episode_with_zero_reward() {
    let d = retail();
    let r = router(retail_solver());
    let t = PromptTemplates::builtin();
    let cfg = AgentConfig {
        context_window: 100,
        ..config(StrategyKind::FullContextReact)
    };
    let task = d.task("retail-008").unwrap().clone();
    let rec = Agent::new(&t, &r, &cfg)
        .run_episode(&d, &task, 0, NoiseConfig::off(), "e5", Clock::Logical)
        .await;
    assert_eq!(rec.failure_cause, Some(FailureCause::ContextOverflow));
    assert_eq!(rec.reward, 0.0);
    assert!(rec.failed());
    assert!(rec.metrics.turn_prompt_tokens.is_empty());
}

#[tokio::test]
async fn backend_error_is_recorded() {
    let d = retail();
    let failing: Arc<dyn ChatBackend> = Arc::new(FnBackend::new("down", |_, _| {
        Err(BackendError::HttpStatus {
            status: 500,
            body: "boom".into(),
        })
    }));
    let r = router(vec![]).route(ModelRole::Agent, failing, "m");
    let t = PromptTemplates::builtin();
    let cfg = config(StrategyKind::FullContextReact);
    let task = scripted_task(&["hello", "###DONE###"]);
    let rec = Agent::new(&t, &r, &cfg)
        .run_episode(&d, &task, 0, NoiseConfig::off(), "e6", Clock::Logical)
        .await;
    assert_eq!(rec.failure_cause, Some(FailureCause::BackendError));
    assert_eq!(rec.reward, 0.0);
}

async fn two_turns(strategy: StrategyKind, budget_tokens: usize) -> (Session, RoleRouter) {
    let d = retail();
    let r = router(vec![
        ScriptedRule::when(vec![Condition::contains("<observation>").in_last()], fin("done")),
        ScriptedRule::always(act("get_order_details", json!({"order_id": "O1"}))),
    ]);
    let t = PromptTemplates::builtin();
    let cfg = AgentConfig {
        budget_tokens,
        ..config(strategy)
    };
    let mut s = session(&d);
    let agent = Agent::new(&t, &r, &cfg);
    agent.run_turn(&mut s, "first").await.unwrap();
    agent.run_turn(&mut s, "second").await.unwrap();
    (s, r)
}

fn first_agent_prompt_of_turn2(r: &RoleRouter) -> Vec<ChatMessage> {
    r.calls_for(ModelRole::Agent)[2].request.messages.clone()
}

#[tokio::test]
async fn full_context_carries_raw_history_and_never_folds() {
    let (_, r) = two_turns(StrategyKind::FullContextReact, 0).await;
    let msgs = first_agent_prompt_of_turn2(&r);
    assert_eq!(msgs[1].content, "first");
    assert!(msgs.iter().any(|m| m.content.starts_with("<observation>")));
    assert!(r.calls_for(ModelRole::Summarizer).is_empty());
    assert!(r.calls_for(ModelRole::Extractor).is_empty());
}

#[tokio::test]
async fn u_fold_folds_once_per_turn() {
    let (s, r) = two_turns(StrategyKind::UFold, 0).await;
    assert_eq!(r.calls_for(ModelRole::Summarizer).len(), 2);
    // no history at turn 1, so only turn 2 asks the extractor
    assert_eq!(r.calls_for(ModelRole::Extractor).len(), 1);
    let msgs = first_agent_prompt_of_turn2(&r);
    assert_eq!(msgs.len(), 2);
    assert!(msgs[0].content.contains("Step1. Help the user"));
    assert!(s.last_fold.is_some());
}

#[tokio::test]
async fn budget_summarize_triggers_only_over_budget() {
    let (_, r) = two_turns(StrategyKind::BudgetSummarize, 1_000_000).await;
    assert!(r.calls_for(ModelRole::Summarizer).is_empty());
    let (s, r) = two_turns(StrategyKind::BudgetSummarize, 10).await;
    let sums = r.calls_for(ModelRole::Summarizer);
    assert_eq!(sums.len(), 1);
    // the baseline summarizes raw turns, observations included
    assert!(sums[0].request.messages[0].content.contains("Observation: {"));
    let msgs = first_agent_prompt_of_turn2(&r);
    assert_eq!(msgs.len(), 2);
    assert!(msgs[0].content.contains("Conversation summary:"));
    assert!(s.last_context.contains("Step1."));
}

#[tokio::test]
async fn per_turn_reconstruct_rebuilds_from_turn_two() {
    let (_, r) = two_turns(StrategyKind::PerTurnReconstruct, 0).await;
    assert_eq!(r.calls_for(ModelRole::Summarizer).len(), 1);
    assert_eq!(first_agent_prompt_of_turn2(&r).len(), 2);
}

#[tokio::test]
async fn events_replay_to_the_same_ledger() {
    let d = retail();
    let r = router(retail_solver());
    let t = PromptTemplates::builtin();
    let cfg = config(StrategyKind::UFold);
    let task = d.task("retail-008").unwrap().clone();
    let rec = Agent::new(&t, &r, &cfg)
        .run_episode(&d, &task, 0, NoiseConfig::off(), "e7", Clock::Logical)
        .await;
    let replayed = crate::transcript::log::replay_ledger(&rec.events).unwrap();
    assert_eq!(replayed, rec.ledger);
}

#[test]
fn strategy_names() {
    for k in StrategyKind::ALL {
        assert_eq!(StrategyKind::parse(k.as_str()), Some(k));
        assert_eq!(serde_json::to_value(k).unwrap(), json!(k.as_str()));
    }
}
