use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Document, BYTE_SEPARATOR, BYTE_VOCAB};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum CorpusSpec {
    Markov(MarkovSpec),
    Template(TemplateSpec),
    Files(FilesSpec),
}

/// First-order Markov text over `vocab_size - 1` symbols; the last id is
/// the separator. Each subset gets its own transition matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    pub vocab_size: usize,
    pub n_docs: usize,
    /// Document length in tokens including the trailing separator.
    pub min_len: usize,
    pub max_len: usize,
    pub subsets: Vec<String>,
    /// Successors with non-negligible probability per state.
    pub branching: usize,
    /// Probability mass spread uniformly over all symbols.
    pub smoothing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub n_docs: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub subsets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesSpec {
    pub paths: Vec<PathBuf>,
}

pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    match spec {
        CorpusSpec::Markov(s) => markov(s, seed),
        CorpusSpec::Template(s) => template(s, seed),
        CorpusSpec::Files(s) => ingest_files(&s.paths),
    }
}

struct Chain {
    /// Cumulative transition probabilities per state.
    cdf: Vec<Vec<f64>>,
}

impl Chain {
    fn random(symbols: usize, branching: usize, smoothing: f64, rng: &mut ChaCha8Rng) -> Self {
        let cdf = (0..symbols)
            .map(|_| {
                let mut p = vec![smoothing / symbols as f64; symbols];
                let mut w: Vec<f64> = (0..branching).map(|_| rng.random_range(0.5..1.5)).collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|x| *x /= total);
                for wk in w {
                    p[rng.random_range(0..symbols)] += (1.0 - smoothing) * wk;
                }
                let mut acc = 0.0;
                p.iter()
                    .map(|x| {
                        acc += x;
                        acc
                    })
                    .collect()
            })
            .collect();
        Self { cdf }
    }

    fn next(&self, state: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = &self.cdf[state];
        let u = rng.random::<f64>() * row[row.len() - 1];
        row.partition_point(|&c| c <= u).min(row.len() - 1)
    }
}

fn markov(s: &MarkovSpec, seed: u64) -> Result<Corpus> {
    if s.vocab_size < 3 {
        return Err(Error::Config(
            "markov generator needs vocab_size >= 3".into(),
        ));
    }
    if s.min_len < 2 || s.max_len < s.min_len {
        return Err(Error::Config(format!(
            "markov document lengths must satisfy 2 <= min_len <= max_len, got {}..{}",
            s.min_len, s.max_len
        )));
    }
    if s.subsets.is_empty() || s.branching == 0 || !(0.0..=1.0).contains(&s.smoothing) {
        return Err(Error::Config(
            "markov generator needs subsets, branching >= 1 and smoothing in [0,1]".into(),
        ));
    }
    let symbols = s.vocab_size - 1;
    let sep = symbols as u32;
    let chains: Vec<Chain> = s
        .subsets
        .iter()
        .map(|name| {
            Chain::random(
                symbols,
                s.branching,
                s.smoothing,
                &mut seed::rng(seed, &[seed::tag(name)]),
            )
        })
        .collect();
    let mut rng = seed::rng(seed, &[seed::tag("markov-docs")]);
    let docs = (0..s.n_docs)
        .map(|i| {
            let k = i % s.subsets.len();
            let len = rng.random_range(s.min_len..=s.max_len);
            let mut state = rng.random_range(0..symbols);
            let mut tokens = Vec::with_capacity(len);
            for _ in 0..len - 1 {
                tokens.push(state as u32);
                state = chains[k].next(state, &mut rng);
            }
            tokens.push(sep);
            Document {
                id: i as u64,
                tokens,
                subset: s.subsets[k].clone(),
                noise: 0.0,
            }
        })
        .collect();
    Corpus::new(s.vocab_size, sep, false, docs)
}

const ADJ: &[&str] = &[
    "quick", "quiet", "bright", "old", "small", "green", "careful", "distant", "heavy", "simple",
];
const NOUN: &[&str] = &[
    "river", "teacher", "garden", "engine", "village", "window", "letter", "market", "forest",
    "bridge",
];
const VERB: &[&str] = &[
    "crosses",
    "follows",
    "builds",
    "watches",
    "repairs",
    "opens",
    "describes",
    "finds",
    "moves",
    "paints",
];
const BOILER: &[&str] = &[
    "Click here to accept our cookie policy",
    "All rights reserved",
    "Lorem ipsum dolor sit amet, consectetur adipiscing elit",
    "Please enable javascript to view this page",
    "Read our terms of use and privacy policy",
];

fn prose_sentence(rng: &mut ChaCha8Rng) -> String {
    let pick =
        |rng: &mut ChaCha8Rng, xs: &[&'static str]| *xs.choose(rng).expect("non-empty word list");
    let end = *[".", ".", ".", "!", "?"].choose(rng).expect("non-empty");
    let s = format!(
        "The {} {} {} the {} {}{}",
        pick(rng, ADJ),
        pick(rng, NOUN),
        pick(rng, VERB),
        pick(rng, ADJ),
        pick(rng, NOUN),
        end
    );
    s
}

fn listing_line(rng: &mut ChaCha8Rng) -> String {
    let noun = NOUN.choose(rng).expect("non-empty");
    match rng.random_range(0..3) {
        0 => format!(
            "item_{}: {} = {};",
            rng.random_range(0..1000),
            noun.to_uppercase(),
            rng.random_range(0..100000)
        ),
        1 => format!("fn {}() {{ return {}; }}", noun, rng.random_range(0..50)),
        _ => format!(
            "- {} {} x{}",
            noun,
            rng.random_range(1..10),
            rng.random_range(10..99)
        ),
    }
}

fn template(s: &TemplateSpec, seed: u64) -> Result<Corpus> {
    if s.subsets.is_empty() || s.min_sentences == 0 || s.max_sentences < s.min_sentences {
        return Err(Error::Config(
            "template generator needs subsets and 1 <= min_sentences <= max_sentences".into(),
        ));
    }
    let mut rng = seed::rng(seed, &[seed::tag("template-docs")]);
    let mut docs = Vec::with_capacity(s.n_docs);
    for i in 0..s.n_docs {
        let k = i % s.subsets.len();
        let n = rng.random_range(s.min_sentences..=s.max_sentences);
        let mut lines = Vec::with_capacity(n);
        for _ in 0..n {
            lines.push(match k % 3 {
                0 => {
                    let per_line = rng.random_range(1..=3);
                    (0..per_line)
                        .map(|_| prose_sentence(&mut rng))
                        .collect::<Vec<_>>()
                        .join(" ")
                }
                1 => listing_line(&mut rng),
                _ => BOILER.choose(&mut rng).expect("non-empty").to_string(),
            });
        }
        let text = lines.join("\n");
        docs.push(text_document(i as u64, &text, &s.subsets[k]));
    }
    Corpus::new(BYTE_VOCAB, BYTE_SEPARATOR, true, docs)
}

fn text_document(id: u64, text: &str, subset: &str) -> Document {
    let mut tokens: Vec<u32> = text.bytes().filter(|&b| b != 0).map(u32::from).collect();
    tokens.push(BYTE_SEPARATOR);
    Document {
        id,
        tokens,
        subset: subset.to_string(),
        noise: 0.0,
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    #[serde(default)]
    id: Option<u64>,
    text: String,
    #[serde(default)]
    subset: Option<String>,
}

/// Byte-level ingestion. `.jsonl` files hold `{"id", "text", "subset"}`
/// records; any other file is UTF-8 text with documents separated by a
/// blank line.
pub fn ingest_files(paths: &[PathBuf]) -> Result<Corpus> {
    if paths.is_empty() {
        return Err(Error::Data("no input files given".into()));
    }
    let mut docs = Vec::new();
    for path in paths {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("default")
            .to_string();
        let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
        if is_jsonl {
            for (line_no, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JsonRecord = serde_json::from_str(line)
                    .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), line_no + 1)))?;
                if rec.text.is_empty() {
                    continue;
                }
                let id = rec.id.unwrap_or(docs.len() as u64);
                docs.push(text_document(
                    id,
                    &rec.text,
                    rec.subset.as_deref().unwrap_or(&stem),
                ));
            }
        } else {
            let normalized = raw.replace("\r\n", "\n");
            for block in normalized.split("\n\n") {
                let text = block.trim_matches('\n');
                if text.trim().is_empty() {
                    continue;
                }
                docs.push(text_document(docs.len() as u64, text, &stem));
            }
        }
    }
    if docs.is_empty() {
        return Err(Error::Data("ingestion produced no documents".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(d) = docs.iter().find(|d| !seen.insert(d.id)) {
        return Err(Error::Data(format!("duplicate document id {}", d.id)));
    }
    Corpus::new(BYTE_VOCAB, BYTE_SEPARATOR, true, docs)
}
