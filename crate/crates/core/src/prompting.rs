//! Rationale templates and few-shot prompt assembly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Task;

pub const KEYWORDS_PLACEHOLDER: &str = "{keywords}";
pub const LABEL_PLACEHOLDER: &str = "{label}";

pub const STANDARD_TEMPLATE: &str =
    "The key words: {keywords} are important clues to predict {label} as the correct answer.";
pub const TYPICAL_PERSON_TEMPLATE: &str =
    "After observing the key words: {keywords}, a typical person would respond with {label} as the correct answer";

/// Default number of keywords per rationale.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template must contain {placeholder} exactly once (found {found})")]
    BadTemplate {
        placeholder: &'static str,
        found: usize,
    },
    #[error("a rationale needs at least one keyword")]
    EmptyKeywords,
    #[error("shot {index} does not fit {mode} mode ({reason})")]
    ModeRationaleMismatch {
        index: usize,
        mode: PromptMode,
        reason: &'static str,
    },
    #[error("unknown builtin template {0:?}")]
    UnknownTemplate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Keywords,
    Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RationaleTemplate {
    source: String,
    segments: Vec<Segment>,
}

impl RationaleTemplate {
    pub fn new(source: impl Into<String>) -> Result<Self, PromptError> {
        let source = source.into();
        for placeholder in [KEYWORDS_PLACEHOLDER, LABEL_PLACEHOLDER] {
            let found = source.matches(placeholder).count();
            if found != 1 {
                return Err(PromptError::BadTemplate { placeholder, found });
            }
        }
        let kw = source.find(KEYWORDS_PLACEHOLDER).unwrap();
        let lb = source.find(LABEL_PLACEHOLDER).unwrap();
        let (first, first_len, second, second_len, first_seg, second_seg) = if kw < lb {
            (kw, KEYWORDS_PLACEHOLDER.len(), lb, LABEL_PLACEHOLDER.len(), Segment::Keywords, Segment::Label)
        } else {
            (lb, LABEL_PLACEHOLDER.len(), kw, KEYWORDS_PLACEHOLDER.len(), Segment::Label, Segment::Keywords)
        };
        let segments = vec![
            Segment::Text(source[..first].to_string()),
            first_seg,
            Segment::Text(source[first + first_len..second].to_string()),
            second_seg,
            Segment::Text(source[second + second_len..].to_string()),
        ];
        Ok(RationaleTemplate { source, segments })
    }

    pub fn standard() -> Self {
        RationaleTemplate::new(STANDARD_TEMPLATE).expect("builtin template is valid")
    }

    pub fn typical_person() -> Self {
        RationaleTemplate::new(TYPICAL_PERSON_TEMPLATE).expect("builtin template is valid")
    }

    pub fn builtin(name: &str) -> Result<Self, PromptError> {
        match name {
            "standard" | "default" => Ok(Self::standard()),
            "typical-person" | "causal" => Ok(Self::typical_person()),
            other => Err(PromptError::UnknownTemplate(other.to_string())),
        }
    }

    /// Plain-text template file; a trailing newline is ignored.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)?;
        RationaleTemplate::new(text.trim_end_matches(['\n', '\r']))
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Text before the first placeholder, used to spot rationale lines.
    pub fn prefix(&self) -> &str {
        match &self.segments[0] {
            Segment::Text(t) => t,
            _ => "",
        }
    }
}

impl Default for RationaleTemplate {
    fn default() -> Self {
        Self::standard()
    }
}

/// `w1`, `w1, and w2`, `w1, w2, and w3`, ...
pub fn join_keywords<S: AsRef<str>>(keywords: &[S]) -> String {
    match keywords {
        [] => String::new(),
        [only] => only.as_ref().to_string(),
        [init @ .., last] => {
            let mut out = String::new();
            for w in init {
                out.push_str(w.as_ref());
                out.push_str(", ");
            }
            out.push_str("and ");
            out.push_str(last.as_ref());
            out
        }
    }
}

pub fn render_rationale<S: AsRef<str>>(
    keywords: &[S],
    label: &str,
    template: &RationaleTemplate,
) -> Result<String, PromptError> {
    if keywords.is_empty() {
        return Err(PromptError::EmptyKeywords);
    }
    let joined = join_keywords(keywords);
    let mut out = String::new();
    for seg in &template.segments {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Keywords => out.push_str(&joined),
            Segment::Label => out.push_str(label),
        }
    }
    Ok(out.trim_end().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    #[serde(rename = "ao")]
    AnswerOnly,
    #[serde(rename = "cot")]
    ChainOfThought,
    #[serde(rename = "amplify")]
    Amplify,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [PromptMode::AnswerOnly, PromptMode::ChainOfThought, PromptMode::Amplify];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::AnswerOnly => "AO",
            PromptMode::ChainOfThought => "CoT",
            PromptMode::Amplify => "AMPLIFY",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ao" | "answer-only" => Ok(PromptMode::AnswerOnly),
            "cot" | "chain-of-thought" => Ok(PromptMode::ChainOfThought),
            "amplify" => Ok(PromptMode::Amplify),
            _ => Err(format!("unknown prompt mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub input_text: String,
    pub rationale: Option<String>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub mode: PromptMode,
    pub shots: Vec<Shot>,
    pub test_input: String,
    pub answer_delimiter: String,
    pub rendered: String,
}

/// Lays out `[input]\n[rationale]\n<delim> <label>` per shot, shots
/// separated by a blank line, then the test input and a bare delimiter.
pub fn build_prompt(
    mode: PromptMode,
    shots: Vec<Shot>,
    test_input: &str,
    delimiter: &str,
) -> Result<PromptSpec, PromptError> {
    for (index, shot) in shots.iter().enumerate() {
        let reason = match (mode, &shot.rationale) {
            (PromptMode::AnswerOnly, Some(_)) => Some("answer-only shots carry no rationale"),
            (PromptMode::ChainOfThought | PromptMode::Amplify, None) => Some("shot is missing its rationale"),
            _ => None,
        };
        if let Some(reason) = reason {
            return Err(PromptError::ModeRationaleMismatch { index, mode, reason });
        }
    }
    let mut blocks: Vec<String> = shots
        .iter()
        .map(|shot| {
            let mut block = shot.input_text.clone();
            if let Some(r) = &shot.rationale {
                block.push('\n');
                block.push_str(r);
            }
            block.push('\n');
            block.push_str(delimiter);
            block.push(' ');
            block.push_str(&shot.label);
            block
        })
        .collect();
    blocks.push(format!("{test_input}\n{delimiter}"));
    let rendered = blocks.join("\n\n");
    Ok(PromptSpec {
        mode,
        shots,
        test_input: test_input.to_string(),
        answer_delimiter: delimiter.to_string(),
        rendered,
    })
}

/// Human rationales keyed by example id, for examples that carry one.
pub fn load_cot_rationales(task: &Task) -> BTreeMap<String, String> {
    task.examples
        .iter()
        .filter_map(|e| e.cot_rationale.as_ref().map(|r| (e.id.clone(), r.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_task;
    use proptest::prelude::*;

    fn shot(input: &str, rationale: Option<&str>, label: &str) -> Shot {
        Shot {
            input_text: input.into(),
            rationale: rationale.map(Into::into),
            label: label.into(),
        }
    }

    #[test]
    fn standard_rationale() {
        let t = RationaleTemplate::standard();
        assert_eq!(
            render_rationale(&["great", "amazing"], "Positive", &t).unwrap(),
            "The key words: great, and amazing are important clues to predict Positive as the correct answer."
        );
        assert_eq!(
            render_rationale(&["great"], "A", &t).unwrap(),
            "The key words: great are important clues to predict A as the correct answer."
        );
        assert_eq!(
            render_rationale(&["a", "b", "c"], "B", &t).unwrap(),
            "The key words: a, b, and c are important clues to predict B as the correct answer."
        );
    }

    #[test]
    fn typical_person_rationale() {
        let t = RationaleTemplate::typical_person();
        assert_eq!(
            render_rationale(&["wire", "battery"], "No", &t).unwrap(),
            "After observing the key words: wire, and battery, a typical person would respond with No as the correct answer"
        );
    }

    #[test]
    fn template_validation() {
        assert!(matches!(
            RationaleTemplate::new("no placeholders"),
            Err(PromptError::BadTemplate { placeholder: KEYWORDS_PLACEHOLDER, found: 0 })
        ));
        assert!(matches!(
            RationaleTemplate::new("{keywords} {keywords} {label}"),
            Err(PromptError::BadTemplate { found: 2, .. })
        ));
        let reversed = RationaleTemplate::new("Answer {label} because of {keywords}.  ").unwrap();
        assert_eq!(render_rationale(&["x"], "B", &reversed).unwrap(), "Answer B because of x.");
        assert!(matches!(render_rationale::<&str>(&[], "B", &reversed), Err(PromptError::EmptyKeywords)));
        // keyword text containing a placeholder is not re-expanded
        let t = RationaleTemplate::standard();
        assert!(render_rationale(&["{label}"], "Q", &t).unwrap().starts_with("The key words: {label} are"));
    }

    #[test]
    fn answer_only_layout() {
        let p = build_prompt(PromptMode::AnswerOnly, vec![shot("Q1", None, "A")], "Q2", "A:").unwrap();
        assert_eq!(p.rendered, "Q1\nA: A\n\nQ2\nA:");
        assert!(!p.rendered.contains(RationaleTemplate::standard().prefix()));
    }

    #[test]
    fn zero_shot_layout() {
        let p = build_prompt(PromptMode::Amplify, vec![], "only the test", "A:").unwrap();
        assert_eq!(p.rendered, "only the test\nA:");
    }

    #[test]
    fn amplify_golden() {
        let golden = include_str!("../tests/golden/amplify_s2.txt");
        let t = RationaleTemplate::standard();
        let shots = vec![
            shot(
                "Is the following sentence plausible? \"The red wire touched the battery.\"",
                Some(&render_rationale(&["wire", "battery", "red"], "Yes", &t).unwrap()),
                "Yes",
            ),
            shot(
                "Is the following sentence plausible? \"The goalie dunked from the corner.\"",
                Some(&render_rationale(&["dunked"], "No", &t).unwrap()),
                "No",
            ),
        ];
        let p = build_prompt(
            PromptMode::Amplify,
            shots,
            "Is the following sentence plausible? \"The striker scored a penalty.\"",
            "A:",
        )
        .unwrap();
        assert_eq!(p.rendered, golden.trim_end_matches('\n'));
    }

    #[test]
    fn mode_mismatch() {
        assert!(matches!(
            build_prompt(PromptMode::AnswerOnly, vec![shot("q", Some("r"), "A")], "t", "A:"),
            Err(PromptError::ModeRationaleMismatch { index: 0, .. })
        ));
        assert!(matches!(
            build_prompt(PromptMode::ChainOfThought, vec![shot("q", Some("r"), "A"), shot("q", None, "A")], "t", "A:"),
            Err(PromptError::ModeRationaleMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn cot_rationales_from_task() {
        let text = r#"{"name":"t","labels":["A","B"]}
{"id":"1","input":"x","gold":"A","split":"train","cot":"Step one.\nSo A."}
{"id":"2","input":"y","gold":"B","split":"validation","cot":"Because \"quoted\" é."}
{"id":"3","input":"z","gold":"B","split":"validation","cot":"Plainly B."}
{"id":"4","input":"w","gold":"A","split":"test"}
"#;
        let task = parse_task(text).unwrap();
        let map = load_cot_rationales(&task);
        assert_eq!(map.len(), 3);
        let reloaded = parse_task(&task.to_jsonl()).unwrap();
        assert_eq!(load_cot_rationales(&reloaded), map);
        assert_eq!(map["2"].as_bytes(), "Because \"quoted\" é.".as_bytes());

        let none = parse_task(r#"{"name":"t","labels":["A"]}
{"id":"1","input":"x","gold":"A","split":"validation"}
{"id":"2","input":"y","gold":"A","split":"test"}"#).unwrap();
        assert!(load_cot_rationales(&none).is_empty());
    }

    proptest! {
        #[test]
        fn keywords_appear_verbatim(words in proptest::collection::vec("[a-z]{1,8}", 1..6), label in "[A-E]") {
            let t = RationaleTemplate::standard();
            let r = render_rationale(&words, &label, &t).unwrap();
            let p = build_prompt(PromptMode::Amplify, vec![shot("input", Some(&r), &label)], "test", "A:").unwrap();
            for w in &words {
                prop_assert!(p.rendered.contains(w.as_str()));
            }
        }

        #[test]
        fn rendering_is_injective_in_label(a in "[A-Za-z]{1,6}", b in "[A-Za-z]{1,6}") {
            let t = RationaleTemplate::standard();
            let ra = render_rationale(&["k"], &a, &t).unwrap();
            let rb = render_rationale(&["k"], &b, &t).unwrap();
            prop_assert_eq!(a == b, ra == rb);
        }

        #[test]
        fn prompt_length_monotone_in_shots(n in 0usize..6) {
            let make = |n: usize| {
                let shots: Vec<Shot> = (0..n).map(|i| shot(&format!("q{i}"), None, "A")).collect();
                build_prompt(PromptMode::AnswerOnly, shots, "test", "A:").unwrap().rendered.len()
            };
            prop_assert!(make(n) <= make(n + 1));
        }
    }
}
