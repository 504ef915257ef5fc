//! Task datasets: labels, examples, splits and word segmentation.
//!
//! Tasks live in a line-oriented JSON file. The first line is a header
//! object (`name`, `labels`, optional `answer_delimiter`); every following
//! non-blank line is one example record (`id`, `input`, optional `choices`,
//! `gold`, `split`, optional `cot`). Unknown keys are ignored.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ANSWER_DELIMITER: &str = "A:";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read task file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record on line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("example {id:?} on line {line_no} has gold label {gold:?} outside the label set")]
    LabelMismatch {
        line_no: usize,
        id: String,
        gold: String,
    },
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),
}

/// Ordered, duplicate-free set of label identifiers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet(Vec<String>);

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(CorpusError::InvalidLabelSet("no labels".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(CorpusError::InvalidLabelSet("empty label".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(CorpusError::InvalidLabelSet(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.0.iter().position(|l| l == label)
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.0.get(index).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = CorpusError;

    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub gold: String,
    pub split: Split,
    #[serde(rename = "cot", default, skip_serializing_if = "Option::is_none")]
    pub cot_rationale: Option<String>,
}

impl Example {
    /// Labels this example may take: the first `|choices|` labels when
    /// choices are present, otherwise the whole set.
    pub fn admissible_labels<'a>(&self, labels: &'a LabelSet) -> &'a [String] {
        match &self.choices {
            Some(c) => &labels.as_slice()[..c.len().min(labels.len())],
            None => labels.as_slice(),
        }
    }

    /// Text shown to both the proxy and the LLM: the input followed by the
    /// lettered options, if any.
    pub fn display_text(&self, labels: &LabelSet) -> String {
        match &self.choices {
            None => self.input_text.clone(),
            Some(choices) => {
                let mut out = self.input_text.clone();
                out.push_str("\nOptions:");
                for (label, choice) in labels.iter().zip(choices) {
                    out.push_str(&format!("\n({label}) {choice}"));
                }
                out
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskHeader {
    name: String,
    labels: LabelSet,
    #[serde(default = "default_delimiter")]
    answer_delimiter: String,
}

fn default_delimiter() -> String {
    DEFAULT_ANSWER_DELIMITER.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub name: String,
    pub label_set: LabelSet,
    pub examples: Vec<Example>,
    pub answer_delimiter: String,
}

impl Task {
    /// Validates and assembles a task from parts.
    pub fn new(
        name: impl Into<String>,
        label_set: LabelSet,
        examples: Vec<Example>,
        answer_delimiter: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let task = Task {
            name: name.into(),
            label_set,
            examples,
            answer_delimiter: answer_delimiter.into(),
        };
        let mut seen = HashSet::new();
        for (i, ex) in task.examples.iter().enumerate() {
            validate_example(ex, &task.label_set, i + 2)?;
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateId(ex.id.clone()));
            }
        }
        for split in [Split::Validation, Split::Test] {
            if !task.examples.iter().any(|e| e.split == split) {
                return Err(CorpusError::EmptySplit(split));
            }
        }
        Ok(task)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn gold_index(&self, example: &Example) -> usize {
        self.label_set
            .index_of(&example.gold)
            .expect("validated task has in-set gold labels")
    }

    /// Serializes back to the line format read by [`load_task`].
    pub fn to_jsonl(&self) -> String {
        let header = TaskHeader {
            name: self.name.clone(),
            labels: self.label_set.clone(),
            answer_delimiter: self.answer_delimiter.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

fn validate_example(ex: &Example, labels: &LabelSet, line_no: usize) -> Result<(), CorpusError> {
    if ex.input_text.trim().is_empty() {
        return Err(CorpusError::MalformedRecord {
            line_no,
            reason: format!("example {:?} has empty input", ex.id),
        });
    }
    if let Some(choices) = &ex.choices {
        if choices.is_empty() || choices.len() > labels.len() {
            return Err(CorpusError::MalformedRecord {
                line_no,
                reason: format!(
                    "example {:?} has {} choices for {} labels",
                    ex.id,
                    choices.len(),
                    labels.len()
                ),
            });
        }
    }
    if !ex.admissible_labels(labels).contains(&ex.gold) {
        return Err(CorpusError::LabelMismatch {
            line_no,
            id: ex.id.clone(),
            gold: ex.gold.clone(),
        });
    }
    Ok(())
}

/// Parses task text in the line format.
pub fn parse_task(text: &str) -> Result<Task, CorpusError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (header_line, header_text) = lines.next().ok_or(CorpusError::MalformedRecord {
        line_no: 1,
        reason: "missing header".into(),
    })?;
    let header: TaskHeader =
        serde_json::from_str(header_text).map_err(|e| CorpusError::MalformedRecord {
            line_no: header_line,
            reason: e.to_string(),
        })?;

    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in lines {
        let ex: Example = serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
            line_no,
            reason: e.to_string(),
        })?;
        validate_example(&ex, &header.labels, line_no)?;
        if !seen.insert(ex.id.clone()) {
            return Err(CorpusError::DuplicateId(ex.id));
        }
        examples.push(ex);
    }
    Task::new(header.name, header.labels, examples, header.answer_delimiter)
}

pub fn load_task(path: impl AsRef<Path>) -> Result<Task, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    parse_task(&text)
}

/// Per-split example counts; every split is present, possibly with 0.
pub fn split_counts(task: &Task) -> BTreeMap<Split, usize> {
    let mut counts: BTreeMap<Split, usize> = Split::ALL.iter().map(|s| (*s, 0)).collect();
    for ex in &task.examples {
        *counts.entry(ex.split).or_default() += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub surface: String,
    /// Byte offsets into the segmented text, `start..end`.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSegmentation {
    pub words: Vec<Word>,
}

impl WordSegmentation {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|w| w.surface.as_str())
    }
}

/// Splits on whitespace, then peels leading and trailing non-alphanumeric
/// characters off each chunk as single-character words. Interior
/// punctuation (apostrophes, hyphens) stays inside the word.
pub fn word_segment(text: &str) -> WordSegmentation {
    let mut words = Vec::new();
    let mut push = |start: usize, end: usize| {
        words.push(Word {
            surface: text[start..end].to_string(),
            start,
            end,
        })
    };

    for (chunk_start, chunk) in whitespace_chunks(text) {
        let chars: Vec<(usize, char)> = chunk.char_indices().collect();
        let lead = chars.iter().take_while(|(_, c)| !c.is_alphanumeric()).count();
        if lead == chars.len() {
            for (off, c) in &chars {
                push(chunk_start + off, chunk_start + off + c.len_utf8());
            }
            continue;
        }
        let trail = chars.iter().rev().take_while(|(_, c)| !c.is_alphanumeric()).count();
        for (off, c) in &chars[..lead] {
            push(chunk_start + off, chunk_start + off + c.len_utf8());
        }
        let core_start = chunk_start + chars[lead].0;
        let (last_off, last_c) = chars[chars.len() - trail - 1];
        push(core_start, chunk_start + last_off + last_c.len_utf8());
        for (off, c) in &chars[chars.len() - trail..] {
            push(chunk_start + off, chunk_start + off + c.len_utf8());
        }
    }
    WordSegmentation { words }
}

fn whitespace_chunks(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut rest_start = 0;
    std::iter::from_fn(move || {
        let rest = &text[rest_start..];
        let skip = rest.len() - rest.trim_start().len();
        let start = rest_start + skip;
        if start >= text.len() {
            return None;
        }
        let chunk_len = text[start..]
            .find(char::is_whitespace)
            .unwrap_or(text.len() - start);
        rest_start = start + chunk_len;
        Some((start, &text[start..start + chunk_len]))
    })
}
