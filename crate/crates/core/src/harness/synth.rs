//! Planted-signal classification tasks.
//!
//! Every example is a short run of distractor words with exactly one
//! signal word inserted at a random position. The signal word's owner in
//! the lexicon is the gold label, so labels are recoverable by lookup.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::rngs::ChaCha8Rng;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::corpus::{word_segment, Example, LabelSet, Split, Task, DEFAULT_ANSWER_DELIMITER};
use crate::llmclient::Gate;

use super::HarnessError;

const SIGNAL_POOL: [&str; 48] = [
    "battery", "voltage", "circuit", "magnet", "copper", "socket", "harbor", "anchor",
    "glacier", "canyon", "meadow", "volcano", "violin", "trumpet", "cello", "banjo",
    "falcon", "otter", "badger", "heron", "saffron", "ginger", "nutmeg", "cumin",
    "quartz", "granite", "marble", "basalt", "comet", "nebula", "quasar", "pulsar",
    "tulip", "orchid", "lotus", "poppy", "walnut", "almond", "cashew", "pecan",
    "lantern", "compass", "ledger", "quill", "sapphire", "emerald", "topaz", "garnet",
];

const DISTRACTORS: [&str; 40] = [
    "the", "a", "of", "and", "to", "in", "was", "it", "with", "as",
    "on", "by", "that", "this", "from", "very", "then", "there", "some", "many",
    "old", "new", "small", "large", "quiet", "bright", "slow", "warm", "near", "far",
    "seemed", "looked", "stood", "came", "went", "found", "kept", "made", "held", "saw",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub labels: Vec<String>,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub signals_per_label: usize,
    /// Words per example, signal included.
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            name: "synthetic".into(),
            labels: vec!["Yes".into(), "No".into()],
            n_train: 500,
            n_validation: 100,
            n_test: 100,
            signals_per_label: 4,
            min_words: 5,
            max_words: 9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSignals {
    pub label: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub signals: Vec<LabelSignals>,
    pub distractors: Vec<String>,
}

impl Lexicon {
    pub fn label_of(&self, word: &str) -> Option<&str> {
        let w = word.to_lowercase();
        self.signals
            .iter()
            .find(|s| s.words.iter().any(|x| *x == w))
            .map(|s| s.label.as_str())
    }

    /// Signal words present in `text`, in order of appearance.
    pub fn signals_in(&self, text: &str) -> Vec<String> {
        word_segment(text)
            .surfaces()
            .filter(|w| self.label_of(w).is_some())
            .map(str::to_lowercase)
            .collect()
    }

    /// Gold label by lexicon lookup; `None` unless exactly one signal word
    /// is present.
    pub fn lookup_label(&self, text: &str) -> Option<&str> {
        match self.signals_in(text).as_slice() {
            [only] => self.label_of(only),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read lexicon {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Seeded generator; the same spec always yields byte-identical output.
pub fn make_synthetic_task(spec: &SyntheticSpec) -> Result<(Task, Lexicon), HarnessError> {
    if spec.labels.len() < 2 {
        return Err(HarnessError::Config("synthetic task needs at least 2 labels".into()));
    }
    let needed = spec.labels.len() * spec.signals_per_label;
    if spec.signals_per_label == 0 || needed > SIGNAL_POOL.len() {
        return Err(HarnessError::Config(format!(
            "signals_per_label must be in 1..={}",
            SIGNAL_POOL.len() / spec.labels.len()
        )));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(HarnessError::Config("need 1 <= min_words <= max_words".into()));
    }
    let label_set = LabelSet::new(spec.labels.iter().cloned())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool: Vec<&str> = SIGNAL_POOL.to_vec();
    pool.shuffle(&mut rng);
    let signals: Vec<LabelSignals> = spec
        .labels
        .iter()
        .enumerate()
        .map(|(i, label)| LabelSignals {
            label: label.clone(),
            words: pool[i * spec.signals_per_label..(i + 1) * spec.signals_per_label]
                .iter()
                .map(|w| w.to_string())
                .collect(),
        })
        .collect();

    let mut examples = Vec::new();
    for (split, n) in [
        (Split::Train, spec.n_train),
        (Split::Validation, spec.n_validation),
        (Split::Test, spec.n_test),
    ] {
        // balanced labels in a shuffled order
        let mut golds: Vec<usize> = (0..n).map(|i| i % spec.labels.len()).collect();
        golds.shuffle(&mut rng);
        for (i, gold) in golds.into_iter().enumerate() {
            let len = rng.random_range(spec.min_words..=spec.max_words);
            let mut words: Vec<&str> = (0..len - 1)
                .map(|_| DISTRACTORS[rng.random_range(0..DISTRACTORS.len())])
                .collect();
            let lex = &signals[gold].words;
            let signal = lex[rng.random_range(0..lex.len())].as_str();
            words.insert(rng.random_range(0..len), signal);
            let label = &spec.labels[gold];
            examples.push(Example {
                id: format!("{}-{i:04}", split.as_str()),
                input_text: format!("{}.", words.join(" ")),
                choices: None,
                gold: label.clone(),
                split,
                cot_rationale: Some(format!(
                    "The sentence mentions {signal}, which points to {label}."
                )),
            });
        }
    }
    let task = Task::new(&spec.name, label_set, examples, DEFAULT_ANSWER_DELIMITER)?;
    let lexicon = Lexicon {
        signals,
        distractors: DISTRACTORS.iter().map(|w| w.to_string()).collect(),
    };
    Ok((task, lexicon))
}

/// One gate per example. Any signal word of the example's gold label opens
/// it, so a rationale that exposes the cue for a label serves every item
/// of that label.
pub fn gates_for_task(task: &Task, lexicon: &Lexicon) -> HashMap<String, Gate> {
    task.examples
        .iter()
        .map(|e| {
            (
                e.id.clone(),
                Gate {
                    triggers: lexicon
                        .signals
                        .iter()
                        .filter(|s| s.label == e.gold)
                        .flat_map(|s| s.words.iter().cloned())
                        .collect(),
                    gold: e.gold.clone(),
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_train: 10,
            n_validation: 5,
            n_test: 5,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn counts_and_single_signal() {
        let (task, lex) = make_synthetic_task(&small(1)).unwrap();
        assert_eq!(task.examples.len(), 20);
        for e in &task.examples {
            assert_eq!(lex.signals_in(&e.input_text).len(), 1, "{}", e.input_text);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = make_synthetic_task(&small(5)).unwrap();
        let b = make_synthetic_task(&small(5)).unwrap();
        assert_eq!(a.0.to_jsonl(), b.0.to_jsonl());
        assert_eq!(serde_json::to_string(&a.1).unwrap(), serde_json::to_string(&b.1).unwrap());
        let c = make_synthetic_task(&small(6)).unwrap();
        assert_ne!(a.0.to_jsonl(), c.0.to_jsonl());
    }

    #[test]
    fn rejects_single_label() {
        let spec = SyntheticSpec {
            labels: vec!["only".into()],
            ..small(0)
        };
        assert!(make_synthetic_task(&spec).is_err());
    }

    #[test]
    fn pools_are_disjoint() {
        for s in SIGNAL_POOL {
            assert!(!DISTRACTORS.contains(&s));
        }
    }

    #[test]
    fn gates_hold_the_signal() {
        let (task, lex) = make_synthetic_task(&small(2)).unwrap();
        let gates = gates_for_task(&task, &lex);
        for e in &task.examples {
            let g = &gates[&e.id];
            assert_eq!(g.gold, e.gold);
            assert!(!g.triggers.is_empty());
            assert!(g.triggers.iter().all(|t| lex.label_of(t) == Some(e.gold.as_str())));
            assert!(lex.signals_in(&e.input_text).iter().all(|w| g.triggers.contains(w)));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lexicon_lookup_recovers_every_label(seed in 0u64..1000, labels in 2usize..5) {
            let spec = SyntheticSpec {
                labels: (0..labels).map(|i| format!("L{i}")).collect(),
                n_train: 30,
                n_validation: 10,
                n_test: 10,
                ..SyntheticSpec { seed, ..SyntheticSpec::default() }
            };
            let (task, lex) = make_synthetic_task(&spec).unwrap();
            for e in &task.examples {
                prop_assert_eq!(lex.lookup_label(&e.input_text), Some(e.gold.as_str()));
            }
        }
    }
}
