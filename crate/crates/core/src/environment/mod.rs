//! Toy task worlds: a JSON document store, the tools that read and mutate
//! it, seeded distractor noise, the user simulator, and binary reward.

mod domain;
mod noise;
mod user;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub use domain::{Domain, DomainError, Goal, GoalCheck, ForbiddenMutation, TaskSpec, FORMAT_VERSION};
pub use noise::{NoiseConfig, DISTRACTOR_PREFIX};
pub use user::{UserScenario, UserSimulator, UserError, DEFAULT_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
}

impl ParamType {
    fn accepts(self, v: &Value) -> bool {
        match self {
            ParamType::String => v.is_string(),
            ParamType::Integer => v.is_i64() || v.is_u64(),
            ParamType::Number => v.is_number(),
            ParamType::Boolean => v.is_boolean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub kind: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default)]
    pub description: String,
}

/// What the agent sees of a tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamSpec>,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        ToolSpec {
            name: name.into(),
            description: description.into(),
            parameters: BTreeMap::new(),
        }
    }

    pub fn param(mut self, name: impl Into<String>, kind: ParamType, required: bool, description: impl Into<String>) -> Self {
        self.parameters.insert(
            name.into(),
            ParamSpec {
                kind,
                required,
                description: description.into(),
            },
        );
        self
    }

    fn check(&self, params: &Map<String, Value>) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, spec) in &self.parameters {
            match params.get(name) {
                None if spec.required => problems.push(format!("missing required parameter '{name}'")),
                Some(v) if !spec.kind.accepts(v) => {
                    problems.push(format!("parameter '{name}' must be of type {:?}", spec.kind).to_lowercase())
                }
                _ => {}
            }
        }
        for name in params.keys() {
            if !self.parameters.contains_key(name) {
                problems.push(format!("unexpected parameter '{name}'"));
            }
        }
        problems
    }
}

/// Pretty JSON array of tool specs, as substituted into prompts.
pub fn render_tool_specs(tools: &[ToolSpec]) -> String {
    serde_json::to_string_pretty(tools).unwrap_or_default()
}

/// Where a written field value comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueSource {
    Param { param: String },
    Const { value: Value },
}

impl ValueSource {
    fn resolve(&self, params: &Map<String, Value>) -> Value {
        match self {
            ValueSource::Param { param } => params.get(param).cloned().unwrap_or(Value::Null),
            ValueSource::Const { value } => value.clone(),
        }
    }
}

/// Deterministic effect of a tool on the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolEffect {
    /// Return one document by id.
    Get { collection: String, id_param: String },
    /// Return documents whose fields equal the given parameters.
    Find {
        collection: String,
        /// parameter name → document field
        #[serde(default)]
        filters: BTreeMap<String, String>,
        /// Fields to keep in each result; all when absent.
        #[serde(default)]
        project: Option<Vec<String>>,
    },
    /// Overwrite fields of one document, optionally guarded by required
    /// current values.
    Update {
        collection: String,
        id_param: String,
        #[serde(default)]
        require: BTreeMap<String, Value>,
        set: BTreeMap<String, ValueSource>,
    },
    /// Insert a new document under a generated id.
    Create {
        collection: String,
        id_prefix: String,
        #[serde(default = "default_id_field")]
        id_field: String,
        fields: BTreeMap<String, ValueSource>,
    },
}

fn default_id_field() -> String {
    "id".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDef {
    #[serde(flatten)]
    pub spec: ToolSpec,
    pub effect: ToolEffect,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("schema violation for {tool}: {}", problems.join("; "))]
    SchemaViolation { tool: String, problems: Vec<String> },
    #[error("{0}")]
    Rejected(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToolRegistry {
    tools: Vec<ToolDef>,
}

impl ToolRegistry {
    pub fn new(tools: Vec<ToolDef>) -> Result<Self, DomainError> {
        let mut seen = BTreeSet::new();
        for t in &tools {
            if !seen.insert(t.spec.name.clone()) {
                return Err(DomainError::Invalid(format!("duplicate tool name {}", t.spec.name)));
            }
        }
        Ok(ToolRegistry { tools })
    }

    pub fn specs(&self) -> Vec<ToolSpec> {
        self.tools.iter().map(|t| t.spec.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ToolDef> {
        self.tools.iter().find(|t| t.spec.name == name)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub name: String,
    pub parameters: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mutation {
    pub tool: String,
    pub parameters: Map<String, Value>,
    pub collection: String,
    pub id: String,
    pub before: Option<Value>,
    pub after: Value,
}

pub type Collections = BTreeMap<String, BTreeMap<String, Value>>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub collections: Collections,
    #[serde(default)]
    pub mutation_log: Vec<Mutation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolOutcome {
    pub observation: String,
    pub error: Option<ToolError>,
}

impl WorldState {
    pub fn new(collections: Collections) -> Self {
        WorldState {
            collections,
            mutation_log: Vec::new(),
        }
    }

    pub fn document(&self, collection: &str, id: &str) -> Option<&Value> {
        self.collections.get(collection).and_then(|c| c.get(id))
    }

    /// Runs one tool call. Failures come back as error observations for the
    /// agent, never as a hard error.
    pub fn execute(&mut self, registry: &ToolRegistry, call: &ToolInvocation, noise: &NoiseConfig) -> ToolOutcome {
        let (result, error) = match self.apply(registry, call) {
            Ok(v) => (v, None),
            Err(e) => {
                let mut doc = Map::new();
                doc.insert("error".into(), Value::String(e.to_string()));
                (Value::Object(doc), Some(e))
            }
        };
        let result = noise.inject(result, call);
        ToolOutcome {
            observation: serde_json::to_string_pretty(&result).unwrap_or_default(),
            error,
        }
    }

    fn apply(&mut self, registry: &ToolRegistry, call: &ToolInvocation) -> Result<Value, ToolError> {
        let def = registry
            .get(&call.name)
            .ok_or_else(|| ToolError::UnknownTool(call.name.clone()))?;
        let problems = def.spec.check(&call.parameters);
        if !problems.is_empty() {
            return Err(ToolError::SchemaViolation {
                tool: call.name.clone(),
                problems,
            });
        }
        let params = &call.parameters;
        match &def.effect {
            ToolEffect::Get { collection, id_param } => {
                let id = param_str(params, id_param)?;
                self.document(collection, &id)
                    .cloned()
                    .ok_or_else(|| not_found(collection, &id))
            }
            ToolEffect::Find {
                collection,
                filters,
                project,
            } => {
                let docs = self.collections.get(collection).map(|c| c.values()).into_iter().flatten();
                let results: Vec<Value> = docs
                    .filter(|doc| {
                        filters
                            .iter()
                            .all(|(p, field)| params.get(p).is_none_or(|want| doc.get(field) == Some(want)))
                    })
                    .map(|doc| match project {
                        Some(fields) => {
                            let m: Map<String, Value> = fields
                                .iter()
                                .filter_map(|f| doc.get(f).map(|v| (f.clone(), v.clone())))
                                .collect();
                            Value::Object(m)
                        }
                        None => doc.clone(),
                    })
                    .collect();
                Ok(json!({ "results": results }))
            }
            ToolEffect::Update {
                collection,
                id_param,
                require,
                set,
            } => {
                let id = param_str(params, id_param)?;
                let before = self
                    .document(collection, &id)
                    .cloned()
                    .ok_or_else(|| not_found(collection, &id))?;
                for (field, want) in require {
                    let have = before.get(field).unwrap_or(&Value::Null);
                    if have != want {
                        return Err(ToolError::Rejected(format!(
                            "{collection} {id}: {field} is {have}, expected {want}"
                        )));
                    }
                }
                let mut after = before.clone();
                if let Value::Object(m) = &mut after {
                    for (field, src) in set {
                        m.insert(field.clone(), src.resolve(params));
                    }
                }
                self.collections
                    .get_mut(collection)
                    .expect("collection exists")
                    .insert(id.clone(), after.clone());
                self.mutation_log.push(Mutation {
                    tool: call.name.clone(),
                    parameters: params.clone(),
                    collection: collection.clone(),
                    id,
                    before: Some(before),
                    after: after.clone(),
                });
                Ok(after)
            }
            ToolEffect::Create {
                collection,
                id_prefix,
                id_field,
                fields,
            } => {
                let coll = self.collections.entry(collection.clone()).or_default();
                let mut n = coll.len() + 1;
                while coll.contains_key(&format!("{id_prefix}{n}")) {
                    n += 1;
                }
                let id = format!("{id_prefix}{n}");
                let mut doc: Map<String, Value> =
                    fields.iter().map(|(f, src)| (f.clone(), src.resolve(params))).collect();
                doc.insert(id_field.clone(), Value::String(id.clone()));
                let doc = Value::Object(doc);
                coll.insert(id.clone(), doc.clone());
                self.mutation_log.push(Mutation {
                    tool: call.name.clone(),
                    parameters: params.clone(),
                    collection: collection.clone(),
                    id,
                    before: None,
                    after: doc.clone(),
                });
                Ok(doc)
            }
        }
    }
}

fn param_str(params: &Map<String, Value>, name: &str) -> Result<String, ToolError> {
    match params.get(name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(v) => Ok(v.to_string()),
        None => Err(ToolError::Rejected(format!("missing parameter '{name}'"))),
    }
}

fn not_found(collection: &str, id: &str) -> ToolError {
    ToolError::Rejected(format!("{collection} {id} not found"))
}

/// 1.0 iff every goal equality holds and no forbidden document was mutated.
pub fn evaluate_reward(task: &TaskSpec, world: &WorldState) -> f64 {
    let goal = &task.goal;
    let equalities = goal.equals.iter().all(|check| {
        world
            .document(&check.collection, &check.id)
            .and_then(|doc| lookup_path(doc, &check.field))
            .is_some_and(|v| *v == check.value)
    });
    let forbidden_touched = world.mutation_log.iter().any(|m| {
        goal.forbidden
            .iter()
            .any(|f| f.collection == m.collection && f.id.as_ref().is_none_or(|id| *id == m.id))
    });
    if equalities && !forbidden_touched {
        1.0
    } else {
        0.0
    }
}

fn lookup_path<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(doc, |v, key| v.get(key))
}
