use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::user::DEFAULT_SENTINEL;
use super::{Collections, ToolDef, ToolRegistry, UserScenario, WorldState};

pub const FORMAT_VERSION: u32 = 1;

const RETAIL: &str = include_str!("../../assets/domains/retail.json");
const DELIVERY: &str = include_str!("../../assets/domains/delivery.json");

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid domain file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format_version {0}")]
    Version(u32),
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalCheck {
    pub collection: String,
    pub id: String,
    /// Dotted path into the document.
    pub field: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForbiddenMutation {
    pub collection: String,
    /// Any document of the collection when absent.
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Goal {
    #[serde(default)]
    pub equals: Vec<GoalCheck>,
    #[serde(default)]
    pub forbidden: Vec<ForbiddenMutation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    /// Documents overriding the domain's initial state for this task.
    #[serde(default)]
    pub state_patch: Collections,
    pub user_scenario: UserScenario,
    pub goal: Goal,
    #[serde(default = "default_sentinel")]
    pub termination_sentinel: String,
}

fn default_sentinel() -> String {
    DEFAULT_SENTINEL.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainFile {
    format_version: u32,
    domain: String,
    /// Operating rules handed to the agent as its user instructions.
    policy: String,
    tools: Vec<ToolDef>,
    initial_state: Collections,
    tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub policy: String,
    pub registry: ToolRegistry,
    pub initial_state: Collections,
    pub tasks: Vec<TaskSpec>,
}

impl Domain {
    pub const BUILTIN: [&'static str; 2] = ["retail", "delivery"];

    pub fn builtin(name: &str) -> Result<Domain, DomainError> {
        match name {
            "retail" => Domain::from_json(RETAIL),
            "delivery" => Domain::from_json(DELIVERY),
            other => Err(DomainError::UnknownDomain(other.into())),
        }
    }

    pub fn load(path: &Path) -> Result<Domain, DomainError> {
        let text = std::fs::read_to_string(path).map_err(|source| DomainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Domain::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Domain, DomainError> {
        let file: DomainFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(DomainError::Version(file.format_version));
        }
        let registry = ToolRegistry::new(file.tools)?;
        let mut ids = BTreeSet::new();
        for t in &file.tasks {
            if !ids.insert(t.task_id.as_str()) {
                return Err(DomainError::Invalid(format!("duplicate task_id {}", t.task_id)));
            }
            if t.termination_sentinel.is_empty() {
                return Err(DomainError::Invalid(format!("{}: empty termination sentinel", t.task_id)));
            }
            if let UserScenario::Scripted { turns, alternates } = &t.user_scenario {
                for script in std::iter::once(turns).chain(alternates) {
                    if !script.last().is_some_and(|l| l.contains(&t.termination_sentinel)) {
                        return Err(DomainError::Invalid(format!(
                            "{}: scripted user must end with the termination sentinel",
                            t.task_id
                        )));
                    }
                }
            }
        }
        Ok(Domain {
            name: file.domain,
            policy: file.policy,
            registry,
            initial_state: file.initial_state,
            tasks: file.tasks,
        })
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn initial_world(&self) -> WorldState {
        WorldState::new(self.initial_state.clone())
    }

    pub fn world_for(&self, task: &TaskSpec) -> WorldState {
        let mut state = self.initial_state.clone();
        for (coll, docs) in &task.state_patch {
            state.entry(coll.clone()).or_default().extend(docs.clone());
        }
        WorldState::new(state)
    }
}
