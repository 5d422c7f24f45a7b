use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::backend::{read_calls_jsonl, ModelRole};
use crate::transcript::log::{group_by_episode, read_jsonl, replay_ledger, EventPayload};
use crate::transcript::EpisodeLedger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayedEpisode {
    pub episode_id: String,
    pub events: usize,
    pub turns: u32,
    pub summaries: usize,
    pub folds: usize,
    pub reward: Option<f64>,
    pub failure_cause: Option<String>,
    /// Raw transcript of every turn, rebuilt from the events.
    pub transcript: String,
    pub ledger: EpisodeLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleCallStats {
    pub role: ModelRole,
    pub calls: usize,
    /// Calls per endpoint.
    pub endpoints: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReplaySummary {
    Events { episodes: Vec<ReplayedEpisode> },
    Calls { roles: Vec<RoleCallStats> },
}

/// Replays an episode event log, or tallies a model call log; the kind is
/// detected from the first record.
pub fn replay_log(text: &str) -> Result<ReplaySummary, HarnessError> {
    let first = text.lines().find(|l| !l.trim().is_empty());
    let Some(first) = first else {
        return Ok(ReplaySummary::Events { episodes: Vec::new() });
    };
    let probe: serde_json::Value = serde_json::from_str(first)?;
    if probe.get("prompt_sha256").is_some() {
        return Ok(ReplaySummary::Calls {
            roles: call_stats(text)?,
        });
    }
    let events = read_jsonl(text.as_bytes()).map_err(|e| HarnessError::Log(e.to_string()))?;
    let mut episodes = Vec::new();
    for (episode_id, events) in group_by_episode(events) {
        let ledger = replay_ledger(&events).map_err(|e| HarnessError::Log(e.to_string()))?;
        let mut summaries = 0;
        let mut folds = 0;
        let mut reward = None;
        let mut failure_cause = None;
        for e in &events {
            match &e.payload {
                EventPayload::Summary { .. } => summaries += 1,
                EventPayload::Fold { .. } => folds += 1,
                EventPayload::End {
                    reward: r,
                    failure_cause: c,
                } => {
                    reward = *r;
                    failure_cause = c.clone();
                }
                _ => {}
            }
        }
        episodes.push(ReplayedEpisode {
            episode_id,
            events: events.len(),
            turns: ledger.current_turn(),
            summaries,
            folds,
            reward,
            failure_cause,
            transcript: ledger.render_raw_turns(1, ledger.current_turn()),
            ledger,
        });
    }
    Ok(ReplaySummary::Events { episodes })
}

fn call_stats(text: &str) -> Result<Vec<RoleCallStats>, HarnessError> {
    let mut by_role: BTreeMap<ModelRole, BTreeMap<String, usize>> = BTreeMap::new();
    for c in read_calls_jsonl(text)? {
        *by_role.entry(c.role).or_default().entry(c.endpoint).or_default() += 1;
    }
    Ok(by_role
        .into_iter()
        .map(|(role, endpoints)| RoleCallStats {
            role,
            calls: endpoints.values().sum(),
            endpoints,
        })
        .collect())
}
