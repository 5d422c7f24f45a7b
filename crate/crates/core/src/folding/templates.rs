use std::path::Path;

use thiserror::Error;

use crate::backend::hex_digest;

pub const PUT_HISTORY_HERE: &str = "PUT_HISTORY_HERE";
pub const PUT_CONVERSATION_HERE: &str = "PUT_CONVERSATION_HERE";
pub const PUT_CONTEXT_HERE: &str = "PUT_CONTEXT_HERE";
pub const PUT_TOOLS_HERE: &str = "PUT_TOOLS_HERE";
pub const PUT_SELECTED_CONTEXT_HERE: &str = "PUT_SELECTED_CONTEXT_HERE";
pub const PUT_USER_INSTRUCTIONS_HERE: &str = "PUT_USER_INSTRUCTIONS_HERE";

const SUMMARIZER: &str = include_str!("../../assets/prompts/summarizer.txt");
const EXTRACTOR: &str = include_str!("../../assets/prompts/extractor.txt");
const AGENT: &str = include_str!("../../assets/prompts/agent.txt");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name} is missing placeholder {placeholder}")]
    MissingPlaceholder { name: String, placeholder: String },
}

/// Prompt text with literal `PUT_*_HERE` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: &'static str,
    text: String,
    placeholders: &'static [&'static str],
}

impl Template {
    fn new(name: &'static str, text: String, placeholders: &'static [&'static str]) -> Result<Self, TemplateError> {
        for p in placeholders {
            if !text.contains(p) {
                return Err(TemplateError::MissingPlaceholder {
                    name: name.into(),
                    placeholder: (*p).into(),
                });
            }
        }
        Ok(Template {
            name,
            text,
            placeholders,
        })
    }

    pub fn name(&self) -> &str {
        self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn placeholders(&self) -> &[&'static str] {
        self.placeholders
    }

    pub fn sha256(&self) -> String {
        hex_digest(self.text.as_bytes())
    }

    /// Single left-to-right pass: substituted values are never rescanned, so
    /// a value that happens to contain a placeholder name stays literal.
    /// Placeholders without a value render as the empty string.
    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut rest = self.text.as_str();
        loop {
            let next = self
                .placeholders
                .iter()
                .filter_map(|p| rest.find(p).map(|i| (i, *p)))
                .min_by_key(|(i, _)| *i);
            match next {
                Some((i, p)) => {
                    out.push_str(&rest[..i]);
                    let v = values.iter().find(|(k, _)| *k == p).map_or("", |(_, v)| *v);
                    out.push_str(v);
                    rest = &rest[i + p.len()..];
                }
                None => {
                    out.push_str(rest);
                    return out;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub summarizer: Template,
    pub extractor: Template,
    pub agent: Template,
}

const SUMMARIZER_SLOTS: &[&str] = &[PUT_HISTORY_HERE, PUT_CONVERSATION_HERE];
const EXTRACTOR_SLOTS: &[&str] = &[PUT_TOOLS_HERE, PUT_CONVERSATION_HERE, PUT_CONTEXT_HERE];
const AGENT_SLOTS: &[&str] = &[PUT_TOOLS_HERE, PUT_SELECTED_CONTEXT_HERE, PUT_USER_INSTRUCTIONS_HERE];

impl PromptTemplates {
    /// The templates shipped in `assets/prompts`.
    pub fn builtin() -> Self {
        Self::from_texts(SUMMARIZER.into(), EXTRACTOR.into(), AGENT.into()).expect("shipped templates are valid")
    }

    /// Loads `summarizer.txt`, `extractor.txt` and `agent.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |file: &str| {
            let path = dir.join(file);
            std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        Self::from_texts(read("summarizer.txt")?, read("extractor.txt")?, read("agent.txt")?)
    }

    fn from_texts(summarizer: String, extractor: String, agent: String) -> Result<Self, TemplateError> {
        Ok(PromptTemplates {
            summarizer: Template::new("summarizer", summarizer, SUMMARIZER_SLOTS)?,
            extractor: Template::new("extractor", extractor, EXTRACTOR_SLOTS)?,
            agent: Template::new("agent", agent, AGENT_SLOTS)?,
        })
    }

    pub fn checksums(&self) -> [(&str, String); 3] {
        [
            ("summarizer", self.summarizer.sha256()),
            ("extractor", self.extractor.sha256()),
            ("agent", self.agent.sha256()),
        ]
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_not_rescanned() {
        let t = PromptTemplates::builtin();
        let out = t.summarizer.render(&[
            (PUT_HISTORY_HERE, "PUT_CONVERSATION_HERE"),
            (PUT_CONVERSATION_HERE, "delta"),
        ]);
        assert_eq!(out.matches("PUT_CONVERSATION_HERE").count(), 1);
        assert!(out.contains("\ndelta\n"));
    }

    #[test]
    fn builtin_templates_carry_their_slots() {
        let t = PromptTemplates::builtin();
        assert_eq!(t.summarizer.text().matches(PUT_HISTORY_HERE).count(), 1);
        assert_eq!(t.extractor.text().matches(PUT_CONTEXT_HERE).count(), 1);
        assert_eq!(t.agent.text().matches(PUT_SELECTED_CONTEXT_HERE).count(), 1);
    }

    #[test]
    fn load_dir_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let t = PromptTemplates::builtin();
        std::fs::write(dir.path().join("summarizer.txt"), t.summarizer.text()).unwrap();
        std::fs::write(dir.path().join("extractor.txt"), t.extractor.text()).unwrap();
        std::fs::write(dir.path().join("agent.txt"), "no slots here").unwrap();
        assert!(matches!(
            PromptTemplates::load_dir(dir.path()),
            Err(TemplateError::MissingPlaceholder { .. })
        ));
        std::fs::write(dir.path().join("agent.txt"), t.agent.text()).unwrap();
        assert_eq!(PromptTemplates::load_dir(dir.path()).unwrap(), t);
    }
}
