use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, Endpoint, LlmError, ResponseCache, ResponseSource};

/// Rationale lines the gated mock reads start after this marker.
pub const RATIONALE_MARKER: &str = "key words:";

/// Per-example behaviour for [`MockPolicy::KeywordGated`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gate {
    /// Lowercase words; any of them in a shot rationale opens the gate.
    pub triggers: Vec<String>,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongLabelRule {
    /// Always this label.
    Fixed(String),
    /// The label after gold in the label order, wrapping.
    NextLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockPolicy {
    Fixed(String),
    /// `" (gold)"` for every known example id.
    EchoGold(HashMap<String, String>),
    /// Exact responses by cache key.
    Replay { fixtures: BTreeMap<String, String> },
    /// Answers gold when a rationale in the prompt names one of the test
    /// example's trigger words, otherwise a wrong label.
    KeywordGated {
        gates: HashMap<String, Gate>,
        labels: Vec<String>,
        wrong: WrongLabelRule,
    },
}

pub struct MockEndpoint {
    policy: MockPolicy,
}

impl MockEndpoint {
    pub fn new(policy: MockPolicy) -> Self {
        MockEndpoint { policy }
    }

    pub fn policy(&self) -> &MockPolicy {
        &self.policy
    }
}

/// Lowercase words found after the marker on any prompt line.
pub(crate) fn rationale_words(prompt: &str) -> HashSet<String> {
    let mut out = HashSet::new();
    for line in prompt.lines() {
        let lower = line.to_lowercase();
        if let Some(pos) = lower.find(RATIONALE_MARKER) {
            for w in lower[pos + RATIONALE_MARKER.len()..]
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
            {
                out.insert(w.to_string());
            }
        }
    }
    out
}

fn gated_answer(
    gate: &Gate,
    labels: &[String],
    wrong: &WrongLabelRule,
    prompt: &str,
) -> String {
    let seen = rationale_words(prompt);
    if gate.triggers.iter().any(|t| seen.contains(&t.to_lowercase())) {
        return gate.gold.clone();
    }
    match wrong {
        WrongLabelRule::Fixed(l) => l.clone(),
        WrongLabelRule::NextLabel => {
            let i = labels.iter().position(|l| *l == gate.gold).unwrap_or(0);
            labels[(i + 1) % labels.len().max(1)].clone()
        }
    }
}

impl Endpoint for MockEndpoint {
    fn call(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        match &self.policy {
            MockPolicy::Fixed(text) => Ok(text.clone()),
            MockPolicy::EchoGold(golds) => {
                let id = request.example_id.as_deref().unwrap_or("");
                golds
                    .get(id)
                    .map(|g| format!(" ({g})"))
                    .ok_or_else(|| LlmError::MockMiss(id.to_string()))
            }
            MockPolicy::Replay { fixtures } => {
                let key = super::cache_key(request);
                fixtures.get(&key).cloned().ok_or(LlmError::MockMiss(key))
            }
            MockPolicy::KeywordGated { gates, labels, wrong } => {
                let id = request
                    .example_id
                    .as_deref()
                    .ok_or_else(|| LlmError::MockMiss("request without example id".into()))?;
                let gate = gates.get(id).ok_or_else(|| LlmError::MockMiss(id.to_string()))?;
                Ok(format!(" ({})", gated_answer(gate, labels, wrong, &request.prompt)))
            }
        }
    }

    fn source(&self) -> ResponseSource {
        ResponseSource::Mock
    }
}

/// Replay fixtures from every entry of a response cache.
pub fn fixtures_from_cache(cache: &ResponseCache) -> Result<BTreeMap<String, String>, LlmError> {
    Ok(cache
        .entries()?
        .into_iter()
        .map(|e| (e.key, e.raw_text))
        .collect())
}

pub fn save_fixtures(path: &Path, fixtures: &BTreeMap<String, String>) -> Result<(), LlmError> {
    let body = serde_json::to_string_pretty(fixtures).map_err(|e| LlmError::Cache(e.to_string()))?;
    fs::write(path, body).map_err(|e| LlmError::Cache(e.to_string()))
}

pub fn load_fixtures(path: &Path) -> Result<BTreeMap<String, String>, LlmError> {
    let s = fs::read_to_string(path).map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| LlmError::Cache(e.to_string()))
}
