use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{word_segment, WordSegmentation};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[MASK]"];
pub const CONTINUATION: &str = "##";

/// Longest word the greedy piece matcher will try before falling back to UNK.
const MAX_WORD_CHARS: usize = 100;

/// Subword inventory. Specials occupy ids 0..3; whole-word pieces follow,
/// then single characters in word-initial and `##`-continuation form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(pieces: Vec<String>) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Vocab { pieces, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.pieces
    }
}

fn normalize(word: &str) -> String {
    word.to_lowercase()
}

/// Characters every vocabulary tries to cover so that unseen words in
/// plain English text decompose without UNK.
fn base_alphabet() -> impl Iterator<Item = char> {
    ('a'..='z').chain('0'..='9').chain("!\"#$%&'()*+,-./:;<=>?@[]_{}".chars())
}

impl Vocab {
    /// Builds a vocabulary of at most `max_size` pieces (min 3, the specials).
    ///
    /// Whole words are added by descending frequency (ties lexicographic),
    /// then the character fallback set: characters seen in the corpus
    /// followed by the base alphabet, each as an initial piece and a
    /// continuation piece.
    pub fn build<S: AsRef<str>>(corpus_texts: &[S], max_size: usize) -> Vocab {
        let max_size = max_size.max(SPECIALS.len());
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut seen_chars = BTreeSet::new();
        for text in corpus_texts {
            for w in word_segment(text.as_ref()).words {
                let norm = normalize(&w.surface);
                seen_chars.extend(norm.chars());
                *freq.entry(norm).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut present: std::collections::HashSet<String> = pieces.iter().cloned().collect();
        let mut add = |pieces: &mut Vec<String>, p: String| {
            if pieces.len() < max_size && present.insert(p.clone()) {
                pieces.push(p);
            }
        };
        for (w, _) in words {
            add(&mut pieces, w);
        }
        for c in seen_chars.into_iter().chain(base_alphabet()) {
            add(&mut pieces, c.to_string());
            add(&mut pieces, format!("{CONTINUATION}{c}"));
        }
        Vocab::from(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Greedy longest-match-first decomposition of one word; a word that
    /// cannot be fully covered becomes a single UNK.
    pub fn word_pieces(&self, word: &str) -> Vec<usize> {
        let norm = normalize(word);
        if let Some(id) = self.id(&norm) {
            return vec![id];
        }
        let chars: Vec<char> = norm.chars().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return vec![UNK_ID];
        }
        let mut ids = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let body: String = chars[start..end].iter().collect();
                let candidate = if start == 0 {
                    body
                } else {
                    format!("{CONTINUATION}{body}")
                };
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    ids.push(id);
                    start = end;
                }
                None => return vec![UNK_ID],
            }
        }
        ids
    }

    /// Tokenizes a segmented text. Words that would push the sequence past
    /// `max_len` are dropped whole, along with everything after them.
    pub fn tokenize(&self, seg: &WordSegmentation, max_len: usize) -> TokenizedInput {
        let mut token_ids = Vec::new();
        let mut token_to_word = Vec::new();
        for (wi, w) in seg.words.iter().enumerate() {
            let ids = self.word_pieces(&w.surface);
            if token_ids.len() + ids.len() > max_len {
                break;
            }
            token_to_word.extend(std::iter::repeat_n(Some(wi), ids.len()));
            token_ids.extend(ids);
        }
        TokenizedInput {
            token_ids,
            token_to_word,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedInput {
    pub token_ids: Vec<usize>,
    /// Word index per token; `None` for special tokens.
    pub token_to_word: Vec<Option<usize>>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of leading words that kept at least one token.
    pub fn retained_words(&self) -> usize {
        self.token_to_word
            .iter()
            .flatten()
            .max()
            .map_or(0, |m| m + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn small_corpus_vocab() {
        let v = Vocab::build(&["a a b"], 10);
        assert_eq!(&v.pieces()[..5], &["[PAD]", "[UNK]", "[MASK]", "a", "b"]);
        assert_eq!(v.len(), 10);
        assert_eq!(v.id("[MASK]"), Some(MASK_ID));
    }

    #[test]
    fn empty_corpus_gets_fallback_alphabet() {
        let empty: [&str; 0] = [];
        let v = Vocab::build(&empty, 1000);
        assert_eq!(&v.pieces()[..3], &SPECIALS);
        assert!(v.id("a").is_some() && v.id("##z").is_some());
        assert!(v.pieces()[3..].iter().all(|p| p.trim_start_matches(CONTINUATION).chars().count() == 1));
        // unseen words still tokenize without UNK
        let seg = word_segment("hello world");
        assert!(!v.tokenize(&seg, 64).token_ids.contains(&UNK_ID));
    }

    #[test]
    fn max_size_is_respected() {
        let v = Vocab::build(&["one two three four five"], 2);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn single_known_word() {
        let v = Vocab::build(&["great"], 100);
        let t = v.tokenize(&word_segment("great"), 16);
        assert_eq!(t.token_ids.len(), 1);
        assert_eq!(t.token_to_word, vec![Some(0)]);
    }

    #[test]
    fn continuation_pieces_share_word() {
        let v = Vocab::from(
            ["[PAD]", "[UNK]", "[MASK]", "amaz", "##ing"]
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>(),
        );
        let t = v.tokenize(&word_segment("amazing"), 16);
        assert_eq!(t.token_ids, vec![3, 4]);
        assert_eq!(t.token_to_word, vec![Some(0), Some(0)]);
        // no covering pieces: UNK
        let t = v.tokenize(&word_segment("zzz"), 16);
        assert_eq!(t.token_ids, vec![UNK_ID]);
    }

    #[test]
    fn truncation_drops_whole_words() {
        let v = Vocab::from(
            ["[PAD]", "[UNK]", "[MASK]", "ab", "c", "##d"]
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>(),
        );
        let t = v.tokenize(&word_segment("ab ab cd ab"), 3);
        assert_eq!(t.token_ids, vec![3, 3]);
        assert_eq!(t.retained_words(), 2);
    }

    #[test]
    fn synthetic_corpus_has_no_unk() {
        // 500 sentences over a 60-word lexicon; distinct words by set arithmetic
        let lexicon: Vec<String> = (0..60).map(|i| format!("w{i}x{}", i * 7 % 13)).collect();
        let sentences: Vec<String> = (0..500)
            .map(|i| {
                (0..8)
                    .map(|j| lexicon[(i * 31 + j * 17) % lexicon.len()].clone())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let distinct: HashSet<&str> = sentences.iter().flat_map(|s| s.split(' ')).collect();
        let v = Vocab::build(&sentences, distinct.len() + SPECIALS.len());
        for s in &sentences {
            let t = v.tokenize(&word_segment(s), 64);
            assert!(!t.token_ids.contains(&UNK_ID));
        }
    }

    proptest! {
        #[test]
        fn token_map_is_monotone_and_onto(words in proptest::collection::vec("[a-z]{1,9}", 1..40), max_len in 1usize..80) {
            let text = words.join(" ");
            let v = Vocab::build(&[words[..words.len() / 2].join(" ")], 40);
            let seg = word_segment(&text);
            let t = v.tokenize(&seg, max_len);
            prop_assert!(t.len() <= max_len);
            prop_assert_eq!(t.token_ids.len(), t.token_to_word.len());
            let map: Vec<usize> = t.token_to_word.iter().map(|w| w.unwrap()).collect();
            prop_assert!(map.windows(2).all(|p| p[0] <= p[1] && p[1] - p[0] <= 1));
            if let Some(&first) = map.first() {
                prop_assert_eq!(first, 0);
            }
            let covered: HashSet<usize> = map.iter().copied().collect();
            prop_assert_eq!(covered.len(), t.retained_words());
        }
    }
}
