use rand::distr::{Alphanumeric, SampleString};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::ToolInvocation;

/// Every distractor field name starts with this.
pub const DISTRACTOR_PREFIX: &str = "meta_";

const NAMES: &[&str] = &[
    "meta_trace_id",
    "meta_cache_key",
    "meta_region_hint",
    "meta_shard",
    "meta_audit_blob",
    "meta_render_token",
    "meta_ab_bucket",
    "meta_etag",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub distractor_fields_per_result: usize,
    pub distractor_value_length: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            enabled: false,
            distractor_fields_per_result: 4,
            distractor_value_length: 64,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig::default()
    }

    pub fn reseeded(mut self, run_seed: u64) -> Self {
        self.seed ^= run_seed;
        self
    }

    /// Adds distractor fields to a tool result. Existing fields are never
    /// altered. Each result object (or the top-level object when there is no
    /// `results` array) gets its own distractors.
    pub fn inject(&self, result: Value, call: &ToolInvocation) -> Value {
        if !self.enabled || self.distractor_fields_per_result == 0 {
            return result;
        }
        let mut rng = self.rng_for(call);
        let mut result = result;
        match result.get_mut("results").and_then(Value::as_array_mut) {
            Some(items) => {
                for item in items.iter_mut() {
                    if let Value::Object(m) = item {
                        self.add_fields(m, &mut rng);
                    }
                }
            }
            None => {
                if let Value::Object(m) = &mut result {
                    self.add_fields(m, &mut rng);
                }
            }
        }
        result
    }

    fn rng_for(&self, call: &ToolInvocation) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(call.name.as_bytes());
        h.update([0]);
        // serde_json maps are sorted, so this serialization is canonical
        h.update(serde_json::to_string(&call.parameters).unwrap_or_default().as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn add_fields(&self, m: &mut Map<String, Value>, rng: &mut ChaCha8Rng) {
        let mut candidates = (0..).flat_map(|round| {
            NAMES.iter().map(move |n| {
                if round == 0 {
                    n.to_string()
                } else {
                    format!("{n}_{}", round + 1)
                }
            })
        });
        let mut added = 0;
        while added < self.distractor_fields_per_result {
            let name = candidates.next().expect("unbounded names");
            if m.contains_key(&name) {
                continue;
            }
            let value = Alphanumeric.sample_string(rng, self.distractor_value_length);
            m.insert(name, Value::String(value));
            added += 1;
        }
    }
}
