//! JSONL episode event log. One record per event; replaying the records in
//! order rebuilds the ledger exactly.

use std::io::{BufRead, Write};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Cycle, EpisodeLedger, TranscriptError};
use crate::folding::{FoldedContext, Summary};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("event {event_index}: {source}")]
    Replay {
        event_index: u64,
        #[source]
        source: TranscriptError,
    },
    #[error("event index {found} out of order (expected {expected}) in episode {episode_id}")]
    OutOfOrder {
        episode_id: String,
        expected: u64,
        found: u64,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    #[default]
    Wall,
    /// Timestamp derived from the event index; makes logs byte-reproducible.
    Logical,
}

impl Clock {
    fn stamp(self, event_index: u64) -> String {
        let t: DateTime<Utc> = match self {
            Clock::Wall => Utc::now(),
            Clock::Logical => DateTime::from_timestamp_millis(event_index as i64).unwrap_or_default(),
        };
        t.to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventPayload {
    Utterance { text: String },
    Cycle { cycle: Cycle },
    Summary { summary: Summary },
    Fold { folded: FoldedContext },
    ProtocolFailure,
    End {
        reward: Option<f64>,
        failure_cause: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEvent {
    pub episode_id: String,
    pub turn_index: u32,
    pub event_index: u64,
    pub timestamp: String,
    pub payload: EventPayload,
}

#[derive(Debug, Clone)]
pub struct EventLog {
    episode_id: String,
    clock: Clock,
    events: Vec<EpisodeEvent>,
}

impl EventLog {
    pub fn new(episode_id: impl Into<String>, clock: Clock) -> Self {
        EventLog {
            episode_id: episode_id.into(),
            clock,
            events: Vec::new(),
        }
    }

    pub fn episode_id(&self) -> &str {
        &self.episode_id
    }

    pub fn record(&mut self, turn_index: u32, payload: EventPayload) {
        let event_index = self.events.len() as u64;
        self.events.push(EpisodeEvent {
            episode_id: self.episode_id.clone(),
            turn_index,
            event_index,
            timestamp: self.clock.stamp(event_index),
            payload,
        });
    }

    pub fn events(&self) -> &[EpisodeEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<EpisodeEvent> {
        self.events
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        write_jsonl(&self.events, &mut w)
    }
}

pub fn write_jsonl(events: &[EpisodeEvent], mut w: impl Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<EpisodeEvent>, LogError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| LogError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

/// Rebuilds the ledger of one episode from its events.
pub fn replay_ledger(events: &[EpisodeEvent]) -> Result<EpisodeLedger, LogError> {
    let mut ledger = EpisodeLedger::new();
    for (expected, e) in events.iter().enumerate() {
        if e.event_index != expected as u64 {
            return Err(LogError::OutOfOrder {
                episode_id: e.episode_id.clone(),
                expected: expected as u64,
                found: e.event_index,
            });
        }
        let wrap = |source| LogError::Replay {
            event_index: e.event_index,
            source,
        };
        match &e.payload {
            EventPayload::Utterance { text } => {
                ledger.append_user(text.clone()).map_err(wrap)?;
            }
            EventPayload::Cycle { cycle } => ledger.append_cycle(e.turn_index, cycle.clone()).map_err(wrap)?,
            EventPayload::Summary { summary } => ledger.push_summary(summary.clone()),
            EventPayload::ProtocolFailure => ledger.mark_protocol_failure(e.turn_index),
            EventPayload::Fold { .. } => {}
            EventPayload::End { .. } => ledger.terminate(),
        }
    }
    Ok(ledger)
}

/// Splits a mixed log into per-episode event lists, keeping first-seen order.
pub fn group_by_episode(events: Vec<EpisodeEvent>) -> Vec<(String, Vec<EpisodeEvent>)> {
    let mut groups: Vec<(String, Vec<EpisodeEvent>)> = Vec::new();
    for e in events {
        match groups.iter_mut().find(|(id, _)| *id == e.episode_id) {
            Some((_, v)) => v.push(e),
            None => groups.push((e.episode_id.clone(), vec![e])),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transcript::AgentAction;
    use serde_json::json;

    #[test]
    fn logical_clock_is_reproducible() {
        let mut a = EventLog::new("ep", Clock::Logical);
        let mut b = EventLog::new("ep", Clock::Logical);
        for log in [&mut a, &mut b] {
            log.record(1, EventPayload::Utterance { text: "hi".into() });
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut x).unwrap();
        b.write_jsonl(&mut y).unwrap();
        assert_eq!(x, y);
        assert!(String::from_utf8(x).unwrap().contains("1970-01-01T00:00:00.000Z"));
    }

    #[test]
    fn replay_rebuilds_ledger() {
        let mut ledger = EpisodeLedger::new();
        let mut log = EventLog::new("ep-1", Clock::Wall);
        ledger.append_user("cancel O1").unwrap();
        log.record(1, EventPayload::Utterance { text: "cancel O1".into() });
        let params = json!({"order_id": "O1"}).as_object().cloned().unwrap();
        let c = Cycle::tool("cancel it", AgentAction::tool("cancel", params), "{\"status\": \"cancelled\"}");
        ledger.append_cycle(1, c.clone()).unwrap();
        log.record(1, EventPayload::Cycle { cycle: c });
        let f = Cycle::finish("done", "Cancelled.");
        ledger.append_cycle(1, f.clone()).unwrap();
        log.record(1, EventPayload::Cycle { cycle: f });
        ledger.terminate();
        log.record(1, EventPayload::End { reward: Some(1.0), failure_cause: None });

        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let events = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(replay_ledger(&events).unwrap(), ledger);
    }

    #[test]
    fn out_of_order_events_rejected() {
        let mut log = EventLog::new("ep", Clock::Logical);
        log.record(1, EventPayload::Utterance { text: "a".into() });
        log.record(1, EventPayload::Utterance { text: "b".into() });
        let mut events = log.into_events();
        events.swap(0, 1);
        assert!(matches!(replay_ledger(&events), Err(LogError::OutOfOrder { .. })));
    }
}
