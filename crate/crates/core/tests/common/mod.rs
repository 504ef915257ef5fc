#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;

use amplify_core::corpus::Task;
use amplify_core::harness::{make_synthetic_task, ExperimentConfig, Lexicon, LlmSpec, SyntheticSpec};
use amplify_core::llmclient::WrongLabelRule;
use amplify_core::proxy::ProxyConfig;
use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub task_path: PathBuf,
    pub lexicon_path: PathBuf,
    pub task: Task,
    pub lexicon: Lexicon,
}

pub fn synthetic(spec: &SyntheticSpec) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let (task, lexicon) = make_synthetic_task(spec).unwrap();
    let task_path = dir.path().join("task.jsonl");
    let lexicon_path = dir.path().join("lexicon.json");
    task.save(&task_path).unwrap();
    lexicon.save(&lexicon_path).unwrap();
    Fixture { dir, task_path, lexicon_path, task, lexicon }
}

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_train: 120,
        n_validation: 40,
        n_test: 40,
        seed,
        ..SyntheticSpec::default()
    }
}

/// Small one-layer proxy with the keyword-gated mock.
pub fn gated_config(f: &Fixture) -> ExperimentConfig {
    ExperimentConfig {
        task: f.task_path.clone(),
        epochs: 20,
        learning_rate: 3e-3,
        proxy: ProxyConfig { d_model: 32, heads: 4, layers: 1, max_len: 32, ff_mult: 4 },
        llm: LlmSpec::KeywordGated {
            lexicon: f.lexicon_path.clone(),
            wrong: WrongLabelRule::Fixed(String::new()),
        },
        ..ExperimentConfig::default()
    }
}

/// Independent re-implementation of the gate applied to a rendered
/// prompt: gold if any rationale line names a signal word of the gold
/// label, otherwise the first label.
pub fn simulate_gate(prompt: &str, gold: &str, lexicon: &Lexicon, first_label: &str) -> String {
    let mut rationale_words = HashSet::new();
    for line in prompt.lines() {
        let lower = line.to_lowercase();
        if let Some((_, rest)) = lower.split_once("key words:") {
            rationale_words.extend(
                rest.split(|c: char| !c.is_alphanumeric())
                    .filter(|w| !w.is_empty())
                    .map(str::to_string),
            );
        }
    }
    if rationale_words.iter().any(|w| lexicon.label_of(w) == Some(gold)) {
        gold.to_string()
    } else {
        first_label.to_string()
    }
}

/// Accuracy (percent) the simulated gate predicts for a set of prompts.
pub fn simulated_accuracy(task: &Task, lexicon: &Lexicon, prompts: &[(String, String)]) -> f64 {
    let first = task.label_set.get(0).unwrap();
    let correct = prompts
        .iter()
        .filter(|(id, prompt)| {
            let e = task.get(id).unwrap();
            simulate_gate(prompt, &e.gold, lexicon, first) == e.gold
        })
        .count();
    100.0 * correct as f64 / prompts.len() as f64
}
