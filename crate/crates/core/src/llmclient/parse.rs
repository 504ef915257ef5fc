use serde::{Deserialize, Serialize};

use crate::corpus::{Example, LabelSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAnswer {
    Label(String),
    ParseFailure,
}

impl ParsedAnswer {
    pub fn label(&self) -> Option<&str> {
        match self {
            ParsedAnswer::Label(l) => Some(l),
            ParsedAnswer::ParseFailure => None,
        }
    }
}

fn token_matches(token: &str, label: &str) -> bool {
    // single letters are case-sensitive so articles do not read as "A"
    if label.chars().count() == 1 {
        token == label
    } else {
        token.eq_ignore_ascii_case(label) || token.to_lowercase() == label.to_lowercase()
    }
}

/// Extracts a label from a completion. Looks only after the last
/// `delimiter`; tries label tokens first, then choice texts.
pub fn parse_answer(
    raw_text: &str,
    example: Option<&Example>,
    labels: &LabelSet,
    delimiter: &str,
) -> ParsedAnswer {
    let text = match (delimiter.is_empty(), raw_text.rfind(delimiter)) {
        (false, Some(pos)) => &raw_text[pos + delimiter.len()..],
        _ => raw_text,
    };
    let admissible = match example {
        Some(e) => e.admissible_labels(labels),
        None => labels.as_slice(),
    };

    for chunk in text.split_whitespace() {
        let core = chunk.trim_matches(|c: char| !c.is_alphanumeric() && c != '(' && c != ')');
        let token = match core.strip_prefix('(') {
            Some(inner) => match inner.find(')') {
                Some(close) => &inner[..close],
                None => inner,
            },
            None => core.trim_end_matches(')'),
        };
        let token = token.trim_matches(|c: char| !c.is_alphanumeric());
        if token.is_empty() {
            continue;
        }
        if let Some(l) = admissible.iter().find(|l| token_matches(token, l)) {
            return ParsedAnswer::Label(l.clone());
        }
    }

    if let Some(choices) = example.and_then(|e| e.choices.as_ref()) {
        let lower = text.to_lowercase();
        let mut best: Option<(usize, usize)> = None;
        for (i, choice) in choices.iter().enumerate().take(admissible.len()) {
            let c = choice.trim().to_lowercase();
            if c.is_empty() || !lower.contains(&c) {
                continue;
            }
            if best.map_or(true, |(_, len)| c.len() > len) {
                best = Some((i, c.len()));
            }
        }
        if let Some((i, _)) = best {
            return ParsedAnswer::Label(admissible[i].clone());
        }
    }
    ParsedAnswer::ParseFailure
}
