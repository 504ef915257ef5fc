//! Few-shot candidate filtering and ranking.
//!
//! Candidates are validation examples the LLM got wrong. They are ranked
//! by the proxy's misclassification confidence score (MCS), by explanation
//! faithfulness, or sampled at random.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::rngs::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{attribute, faithfulness, AttributionMethod, AttributionOptions};
use crate::corpus::Example;
use crate::proxy::{ProxyError, ProxyModel};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("prediction supplied for unknown example id {0:?}")]
    UnknownExampleId(String),
    #[error("strategy {0} needs a proxy model")]
    MissingProxy(SelectionStrategy),
    #[error("shot count must be at least 1")]
    InvalidShotCount,
    #[error(transparent)]
    Proxy(#[from] ProxyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Random { seed: u64 },
    LowMcs,
    HighMcs,
    FaithfulExp,
}

impl SelectionStrategy {
    pub fn needs_proxy(self) -> bool {
        !matches!(self, SelectionStrategy::Random { .. })
    }

    pub fn short_name(self) -> &'static str {
        match self {
            SelectionStrategy::Random { .. } => "Random",
            SelectionStrategy::LowMcs => "L-MCS",
            SelectionStrategy::HighMcs => "H-MCS",
            SelectionStrategy::FaithfulExp => "F-Exp",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionStrategy::Random { seed } => write!(f, "random:{seed}"),
            SelectionStrategy::LowMcs => f.write_str("l-mcs"),
            SelectionStrategy::HighMcs => f.write_str("h-mcs"),
            SelectionStrategy::FaithfulExp => f.write_str("f-exp"),
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("random") {
            let seed = match rest.strip_prefix(':') {
                Some(seed) => seed.parse().map_err(|_| format!("bad random seed in {s:?}"))?,
                None if rest.is_empty() => 0,
                None => return Err(format!("unknown strategy {s:?}")),
            };
            return Ok(SelectionStrategy::Random { seed });
        }
        match lower.as_str() {
            "l-mcs" | "low-mcs" | "lmcs" => Ok(SelectionStrategy::LowMcs),
            "h-mcs" | "high-mcs" | "hmcs" => Ok(SelectionStrategy::HighMcs),
            "f-exp" | "faithful-exp" | "fexp" => Ok(SelectionStrategy::FaithfulExp),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

/// `p(y*) - p(gold)` where `y*` is the most probable non-gold label
/// (lowest index on ties). Positive exactly when the argmax is not gold.
pub fn mcs_from_probs(probs: &[f64], gold: usize) -> f64 {
    let rival = (0..probs.len())
        .filter(|&l| l != gold)
        .fold(None, |best: Option<usize>, l| match best {
            Some(b) if probs[b] >= probs[l] => Some(b),
            _ => Some(l),
        });
    match rival {
        Some(r) => probs[r] - probs[gold],
        None => -probs[gold],
    }
}

pub fn compute_mcs(model: &ProxyModel, example: &Example) -> Result<f64, ProxyError> {
    let gold = model
        .labels
        .index_of(&example.gold)
        .ok_or_else(|| ProxyError::UnknownLabel(example.gold.clone()))?;
    let (_, input) = model.tokenize_text(&example.display_text(&model.labels));
    Ok(mcs_from_probs(&model.forward(&input)?, gold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub example_id: String,
    /// `None` when the LLM answer was missing or unparseable.
    pub llm_predicted: Option<String>,
    pub llm_misclassified: bool,
    pub mcs: Option<f64>,
    pub faithfulness: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Candidates<'a> {
    pub examples: Vec<&'a Example>,
    pub records: Vec<SelectionRecord>,
}

/// Validation examples whose LLM prediction differs from gold. Missing or
/// unparseable predictions count as misclassified.
pub fn filter_llm_misclassified<'a>(
    validation: &[&'a Example],
    llm_predictions: &HashMap<String, Option<String>>,
) -> Result<Candidates<'a>, SelectionError> {
    let ids: HashSet<&str> = validation.iter().map(|e| e.id.as_str()).collect();
    let mut unknown: Vec<&String> = llm_predictions
        .keys()
        .filter(|id| !ids.contains(id.as_str()))
        .collect();
    unknown.sort();
    if let Some(id) = unknown.first() {
        return Err(SelectionError::UnknownExampleId((*id).clone()));
    }
    let mut examples = Vec::new();
    let mut records = Vec::new();
    for &ex in validation {
        let predicted = llm_predictions.get(&ex.id).cloned().flatten();
        let wrong = predicted.as_deref() != Some(ex.gold.as_str());
        if wrong {
            examples.push(ex);
        }
        records.push(SelectionRecord {
            example_id: ex.id.clone(),
            llm_predicted: predicted,
            llm_misclassified: wrong,
            mcs: None,
            faithfulness: None,
        });
    }
    Ok(Candidates { examples, records })
}

/// What the ranking strategies need beyond the candidates themselves.
#[derive(Debug, Clone, Copy)]
pub struct ScoringContext<'m> {
    pub model: Option<&'m ProxyModel>,
    pub method: AttributionMethod,
    pub k: usize,
    pub options: AttributionOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub example_id: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub strategy: SelectionStrategy,
    /// Chosen shots in prompt order.
    pub chosen: Vec<ScoredCandidate>,
    /// Every candidate with its strategy score.
    pub scored: Vec<ScoredCandidate>,
    /// How many shots short of `s` the candidate pool fell.
    pub shortfall: usize,
}

/// Faithfulness of the gold-label explanation at `k` keywords.
pub fn explanation_faithfulness(
    model: &ProxyModel,
    example: &Example,
    method: AttributionMethod,
    k: usize,
    options: &AttributionOptions,
) -> Result<f64, ProxyError> {
    let gold = model
        .labels
        .index_of(&example.gold)
        .ok_or_else(|| ProxyError::UnknownLabel(example.gold.clone()))?;
    let (seg, input) = model.tokenize_text(&example.display_text(&model.labels));
    let result = attribute(model, &input, &seg, gold, method, options)?;
    faithfulness(model, &input, &seg, &result, k)
}

/// Picks `s` shots from `candidates`. Fewer than `s` candidates is not an
/// error: all are returned and the gap is reported as `shortfall`.
pub fn select_shots(
    strategy: SelectionStrategy,
    candidates: &[&Example],
    ctx: &ScoringContext<'_>,
    s: usize,
) -> Result<Selection, SelectionError> {
    if s == 0 {
        return Err(SelectionError::InvalidShotCount);
    }
    let shortfall = s.saturating_sub(candidates.len());
    if shortfall > 0 {
        log::warn!(
            "only {} candidates for {s} shots; using all of them",
            candidates.len()
        );
    }

    let (chosen, scored) = match strategy {
        SelectionStrategy::Random { seed } => {
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let scored: Vec<ScoredCandidate> = candidates
                .iter()
                .map(|e| ScoredCandidate {
                    example_id: e.id.clone(),
                    score: None,
                })
                .collect();
            let chosen = order
                .into_iter()
                .take(s)
                .map(|i| scored[i].clone())
                .collect();
            (chosen, scored)
        }
        _ => {
            let model = ctx.model.ok_or(SelectionError::MissingProxy(strategy))?;
            let mut scored = Vec::with_capacity(candidates.len());
            for ex in candidates {
                let score = match strategy {
                    SelectionStrategy::FaithfulExp => {
                        explanation_faithfulness(model, ex, ctx.method, ctx.k, &ctx.options)?
                    }
                    _ => compute_mcs(model, ex)?,
                };
                scored.push(ScoredCandidate {
                    example_id: ex.id.clone(),
                    score: Some(score),
                });
            }
            let chosen = rank(&scored, strategy == SelectionStrategy::LowMcs, s);
            (chosen, scored)
        }
    };
    Ok(Selection {
        strategy,
        chosen,
        scored,
        shortfall,
    })
}

/// Top `s` by score (descending, or ascending when `lowest`), ties by id.
fn rank(scored: &[ScoredCandidate], lowest: bool, s: usize) -> Vec<ScoredCandidate> {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| {
        let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
        let by_score = if lowest { sa.total_cmp(&sb) } else { sb.total_cmp(&sa) };
        by_score.then_with(|| a.example_id.cmp(&b.example_id))
    });
    sorted.truncate(s);
    sorted
}

/// Ranks precomputed scores; used where scores are supplied externally.
pub fn rank_by_score(scores: &[(String, f64)], strategy: SelectionStrategy, s: usize) -> Vec<String> {
    let scored: Vec<ScoredCandidate> = scores
        .iter()
        .map(|(id, sc)| ScoredCandidate {
            example_id: id.clone(),
            score: Some(*sc),
        })
        .collect();
    rank(&scored, strategy == SelectionStrategy::LowMcs, s)
        .into_iter()
        .map(|c| c.example_id)
        .collect()
}
