//! Text-quality heuristics in the style of C4 / datatrove filters.
//!
//! Text is treated as a sequence of Unicode scalar values; byte-level
//! corpora are decoded lossily first. Empty or whitespace-only text yields
//! zero for every feature.

use std::collections::{HashMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;

use crate::data::{tokens_to_text, PackedSequence};

pub const FEATURE_NAMES: [&str; 23] = [
    "packing_density",
    "num_articles",
    "text_length_cutoff",
    "word_count",
    "sentence_count",
    "empty_line_fraction",
    "unique_characters",
    "word_type_token_ratio",
    "non_alphanumeric_fraction",
    "uppercase_letters_fraction",
    "punctuation_fraction",
    "average_word_length",
    "numeric_fraction",
    "5gram_repetition_fraction",
    "c4_lorem_ipsum",
    "c4_curly_brace",
    "c4_contains_javascript",
    "c4_has_long_word",
    "c4_fraction_lines_fail_terminal_punct",
    "c4_fraction_lines_fail_min_words",
    "c4_contains_policy_keyword",
    "c4_sentence_count",
    "passes_all_c4_filters",
];

const POLICY_SUBSTRINGS: [&str; 6] = [
    "terms of use",
    "privacy policy",
    "cookie policy",
    "uses cookies",
    "use of cookies",
    "use cookies",
];

const MAX_WORD_LEN: usize = 1000;
const MIN_WORDS_PER_LINE: usize = 3;
const MIN_SENTENCES: usize = 5;

static EMPTY_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n\s*\n").expect("valid regex"));
static SENTENCE_END: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[.!?]+(\s+|$)").expect("valid regex"));

/// The 23 heuristic features, in [`FEATURE_NAMES`] order. Booleans are 0/1.
#[derive(Clone, Debug, PartialEq)]
pub struct HeuristicVector {
    pub values: [f64; 23],
}

impl HeuristicVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values[i])
    }
}

/// Packing metadata of the sequence a text came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PackingInfo {
    pub density: f64,
    pub num_articles: usize,
}

impl PackingInfo {
    pub const SINGLE: PackingInfo = PackingInfo {
        density: 1.0,
        num_articles: 1,
    };
}

/// Regex sentence splitter: a sentence ends at a run of `.`, `!` or `?`
/// followed by whitespace or the end of the text.
pub fn sentence_count(text: &str) -> usize {
    SENTENCE_END
        .split(text)
        .filter(|s| !s.trim().is_empty())
        .count()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn line_passes(line: &str) -> bool {
    let words: Vec<&str> = line.split_whitespace().collect();
    let lower = line.to_lowercase();
    line.ends_with(['.', '?', '!', '"', '\''])
        && words.len() >= MIN_WORDS_PER_LINE
        && words.iter().all(|w| w.chars().count() <= MAX_WORD_LEN)
        && !lower.contains("javascript")
        && !POLICY_SUBSTRINGS.iter().any(|p| lower.contains(p))
}

pub fn extract_heuristics(text: &str, packing: PackingInfo) -> HeuristicVector {
    let mut v = [0.0; 23];
    v[0] = packing.density;
    v[1] = packing.num_articles as f64;
    if text.trim().is_empty() {
        return HeuristicVector { values: v };
    }
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let words: Vec<&str> = text.split_whitespace().collect();
    let lower = text.to_lowercase();
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();

    v[2] = n as f64;
    v[3] = words.len() as f64;
    v[4] = chars
        .iter()
        .filter(|c| matches!(c, '.' | '!' | '?'))
        .count() as f64;
    v[5] = ratio(
        EMPTY_LINE.find_iter(text).count(),
        chars.iter().filter(|&&c| c == '\n').count(),
    );
    v[6] = ratio(chars.iter().collect::<HashSet<_>>().len(), n);
    v[7] = ratio(words.iter().collect::<HashSet<_>>().len(), words.len());
    v[8] = ratio(chars.iter().filter(|&&c| !is_word_char(c)).count(), n);
    v[9] = ratio(chars.iter().filter(|c| c.is_ascii_uppercase()).count(), n);
    v[10] = ratio(
        chars
            .iter()
            .filter(|&&c| !is_word_char(c) && !c.is_whitespace())
            .count(),
        n,
    );
    v[11] = ratio(
        chars.iter().filter(|c| !c.is_whitespace()).count(),
        words.len(),
    );
    v[12] = ratio(chars.iter().filter(|c| c.is_ascii_digit()).count(), n);
    let grams = words.len().saturating_sub(4);
    let mut seen: HashMap<&[&str], usize> = HashMap::new();
    for g in words.windows(5) {
        *seen.entry(g).or_default() += 1;
    }
    v[13] = ratio(grams - seen.len(), grams);

    let lorem = lower.contains("lorem ipsum");
    let brace = text.contains('{');
    v[14] = flag(lorem);
    v[15] = flag(brace);
    v[16] = flag(
        lines
            .iter()
            .any(|l| l.to_lowercase().contains("javascript")),
    );
    v[17] = flag(words.iter().any(|w| w.chars().count() > MAX_WORD_LEN));
    v[18] = ratio(
        lines
            .iter()
            .filter(|l| !l.ends_with(['.', '?', '!', '"', '\'']))
            .count(),
        lines.len(),
    );
    v[19] = ratio(
        lines
            .iter()
            .filter(|l| l.split_whitespace().count() < MIN_WORDS_PER_LINE)
            .count(),
        lines.len(),
    );
    v[20] = flag(POLICY_SUBSTRINGS.iter().any(|p| lower.contains(p)));
    v[21] = sentence_count(text) as f64;
    let kept: Vec<&str> = lines.iter().copied().filter(|l| line_passes(l)).collect();
    v[22] = flag(!lorem && !brace && sentence_count(&kept.join("\n")) >= MIN_SENTENCES);
    HeuristicVector { values: v }
}

/// Features of a byte-level packed sequence; separators become newlines.
pub fn extract_from_sequence(seq: &PackedSequence, separator: u32) -> HeuristicVector {
    let text = tokens_to_text(&seq.tokens[..seq.valid_len], separator);
    extract_heuristics(
        &text,
        PackingInfo {
            density: seq.packing_density(),
            num_articles: seq.num_articles(),
        },
    )
}
