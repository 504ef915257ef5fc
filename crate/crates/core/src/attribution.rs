//! Gradient-based token attributions, word aggregation, keyword
//! extraction and perturbation faithfulness.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::WordSegmentation;
use crate::proxy::tensor::{dot, norm, softmax};
use crate::proxy::{argmax, GradientTarget, ProxyError, ProxyModel, TokenizedInput, MASK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    /// ℓ2 norm of the gradient row.
    Grad,
    /// Gradient row dotted with the token embedding.
    GradXInput,
    /// Norm of `g(target) - g(contrast)`.
    ContrastiveGrad,
    /// `g(target) - g(contrast)` dotted with the token embedding.
    ContrastiveGradXInput,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 4] = [
        AttributionMethod::Grad,
        AttributionMethod::GradXInput,
        AttributionMethod::ContrastiveGrad,
        AttributionMethod::ContrastiveGradXInput,
    ];

    pub fn is_contrastive(self) -> bool {
        matches!(
            self,
            AttributionMethod::ContrastiveGrad | AttributionMethod::ContrastiveGradXInput
        )
    }

    fn times_input(self) -> bool {
        matches!(
            self,
            AttributionMethod::GradXInput | AttributionMethod::ContrastiveGradXInput
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttributionMethod::Grad => "grad",
            AttributionMethod::GradXInput => "grad_x_input",
            AttributionMethod::ContrastiveGrad => "contrastive_grad",
            AttributionMethod::ContrastiveGradXInput => "contrastive_grad_x_input",
        }
    }
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['-', ' '], "_");
        match norm.as_str() {
            "grad" | "vanilla" => Ok(AttributionMethod::Grad),
            "grad_x_input" | "gradxinput" | "grad_x_inp" => Ok(AttributionMethod::GradXInput),
            "contrastive_grad" | "c_grad" => Ok(AttributionMethod::ContrastiveGrad),
            "contrastive_grad_x_input" | "c_grad_x_input" | "c_grad_x_inp" => {
                Ok(AttributionMethod::ContrastiveGradXInput)
            }
            _ => Err(format!("unknown attribution method {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionOptions {
    pub gradient_target: GradientTarget,
    /// When the proxy already predicts the target, contrast against the
    /// runner-up instead of the (identical) prediction.
    pub contrast_fallback: bool,
    /// Fixed contrast label, bypassing prediction.
    pub contrast_override: Option<usize>,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        AttributionOptions {
            gradient_target: GradientTarget::Logit,
            contrast_fallback: true,
            contrast_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyword {
    pub surface: String,
    pub score: f64,
    pub word_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: AttributionMethod,
    pub target: usize,
    pub target_label: String,
    pub contrast: Option<usize>,
    pub contrast_label: Option<String>,
    pub token_scores: Vec<f64>,
    pub word_scores: Vec<f64>,
    /// Every distinct word, best first. Take a prefix for top-k.
    pub top_words: Vec<Keyword>,
}

impl AttributionResult {
    pub fn top_k(&self, k: usize) -> &[Keyword] {
        &self.top_words[..k.min(self.top_words.len())]
    }

    pub fn top_k_surfaces(&self, k: usize) -> Vec<&str> {
        self.top_k(k).iter().map(|w| w.surface.as_str()).collect()
    }
}

fn runner_up(probs: &[f64], excluded: usize) -> Option<usize> {
    (0..probs.len())
        .filter(|&l| l != excluded)
        .fold(None, |best: Option<usize>, l| match best {
            Some(b) if probs[b] >= probs[l] => Some(b),
            _ => Some(l),
        })
}

/// Per-token attribution scores for `target`, aggregated to words.
pub fn attribute(
    model: &ProxyModel,
    input: &TokenizedInput,
    seg: &WordSegmentation,
    target: usize,
    method: AttributionMethod,
    options: &AttributionOptions,
) -> Result<AttributionResult, ProxyError> {
    if target >= model.num_labels() {
        return Err(ProxyError::LabelOutOfRange(target));
    }
    let mut grads = model.input_gradients(input, target, options.gradient_target)?;

    let contrast = if method.is_contrastive() {
        let c = match options.contrast_override {
            Some(c) => c,
            None => {
                let probs = model.forward(input)?;
                let predicted = argmax(&probs);
                if predicted == target && options.contrast_fallback {
                    runner_up(&probs, target).unwrap_or(target)
                } else {
                    predicted
                }
            }
        };
        let contrast_grads = model.input_gradients(input, c, options.gradient_target)?;
        for (g, cg) in grads.data.iter_mut().zip(&contrast_grads.data) {
            *g -= cg;
        }
        Some(c)
    } else {
        None
    };

    let embedded = method
        .times_input()
        .then(|| model.embeddings(input))
        .transpose()?;
    let token_scores: Vec<f64> = (0..input.len())
        .map(|i| match &embedded {
            Some(x) => dot(grads.row(i), x.row(i)),
            None => norm(grads.row(i)),
        })
        .collect();

    let word_scores = aggregate_to_words(&token_scores, &input.token_to_word);
    let top_words = top_k_words(&word_scores, seg, usize::MAX);
    let label = |i: usize| model.labels.get(i).unwrap_or_default().to_string();
    Ok(AttributionResult {
        method,
        target,
        target_label: label(target),
        contrast,
        contrast_label: contrast.map(label),
        token_scores,
        word_scores,
        top_words,
    })
}

/// Mean token score per word. Tokens mapped to `None` are ignored; the
/// output covers words `0..=max referenced index`.
pub fn aggregate_to_words(token_scores: &[f64], token_to_word: &[Option<usize>]) -> Vec<f64> {
    let n_words = token_to_word.iter().flatten().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; n_words];
    let mut counts = vec![0usize; n_words];
    for (score, word) in token_scores.iter().zip(token_to_word) {
        if let Some(w) = *word {
            sums[w] += score;
            counts[w] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// The `k` highest-scoring, case-insensitively distinct words. Repeated
/// words keep their best occurrence; ties go to the earlier position.
pub fn top_k_words(word_scores: &[f64], seg: &WordSegmentation, k: usize) -> Vec<Keyword> {
    let mut best: HashMap<String, Keyword> = HashMap::new();
    for (i, (&score, word)) in word_scores.iter().zip(&seg.words).enumerate() {
        let key = word.surface.to_lowercase();
        let candidate = Keyword {
            surface: word.surface.clone(),
            score,
            word_index: i,
        };
        best.entry(key)
            .and_modify(|kw| {
                if score > kw.score {
                    *kw = candidate.clone();
                }
            })
            .or_insert(candidate);
    }
    let mut ranked: Vec<Keyword> = best.into_values().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.word_index.cmp(&b.word_index))
    });
    ranked.truncate(k);
    ranked
}

/// Drop in the target probability when every token of the result's top-k
/// words (all occurrences, case-insensitive) is replaced by MASK.
pub fn faithfulness(
    model: &ProxyModel,
    input: &TokenizedInput,
    seg: &WordSegmentation,
    result: &AttributionResult,
    k: usize,
) -> Result<f64, ProxyError> {
    let top: Vec<String> = result
        .top_k(k)
        .iter()
        .map(|w| w.surface.to_lowercase())
        .collect();
    if top.is_empty() {
        return Ok(0.0);
    }
    let masked_words: Vec<bool> = seg
        .words
        .iter()
        .map(|w| top.contains(&w.surface.to_lowercase()))
        .collect();
    let mut perturbed = input.clone();
    for (id, word) in perturbed.token_ids.iter_mut().zip(&input.token_to_word) {
        if let Some(w) = *word {
            if masked_words.get(w).copied().unwrap_or(false) {
                *id = MASK_ID;
            }
        }
    }
    let original = softmax(&model.logits(input)?)[result.target];
    let after = softmax(&model.logits(&perturbed)?)[result.target];
    Ok(original - after)
}
