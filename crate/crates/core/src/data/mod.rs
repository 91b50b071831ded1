//! Corpora, corruption, packing, splitting and batch sampling.

mod cache;
mod corrupt;
mod generate;
mod pack;
mod sample;
mod split;

pub use cache::{read_packed, write_packed, PACK_MAGIC, PACK_VERSION};
pub use corrupt::{corrupt, corrupt_with_mask};
pub use generate::{
    generate_corpus, ingest_files, CorpusSpec, FilesSpec, MarkovSpec, TemplateSpec,
};
pub use pack::{pack_sequences, PackedSequence};
pub use sample::{oversample_size, sample_batch, Batch, BatchSampler};
pub use split::{split, CorpusSplits, SplitSpec};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Byte-level vocabulary used for ingested text.
pub const BYTE_VOCAB: usize = 256;
/// Separator in byte mode; NUL never appears in ingested text.
pub const BYTE_SEPARATOR: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    /// Token ids; the final token is the corpus separator (end of document).
    pub tokens: Vec<u32>,
    pub subset: String,
    /// Fraction of tokens replaced by uniform noise, 0 for clean data.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub separator: u32,
    /// Whether tokens are raw bytes (text is recoverable).
    pub byte_level: bool,
    pub docs: Vec<Document>,
}

impl Corpus {
    pub fn new(
        vocab_size: usize,
        separator: u32,
        byte_level: bool,
        docs: Vec<Document>,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Data(format!(
                "vocabulary size {vocab_size} is below 2"
            )));
        }
        if separator as usize >= vocab_size {
            return Err(Error::Data(format!(
                "separator {separator} outside vocabulary {vocab_size}"
            )));
        }
        for d in &docs {
            if d.tokens.is_empty() {
                return Err(Error::Data(format!("document {} is empty", d.id)));
            }
            if let Some(t) = d.tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Data(format!(
                    "document {} has token {t} >= {vocab_size}",
                    d.id
                )));
            }
        }
        Ok(Self {
            vocab_size,
            separator,
            byte_level,
            docs,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(|d| d.tokens.len()).sum()
    }

    /// Hex SHA-256 over vocabulary, separator and every document.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vocab_size as u64).to_le_bytes());
        h.update(self.separator.to_le_bytes());
        for d in &self.docs {
            h.update(d.id.to_le_bytes());
            h.update(d.subset.as_bytes());
            h.update([0xff]);
            h.update(d.noise.to_bits().to_le_bytes());
            h.update((d.tokens.len() as u64).to_le_bytes());
            for t in &d.tokens {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Sorted distinct subset labels.
    pub fn subsets(&self) -> Vec<String> {
        let mut s: Vec<String> = self.docs.iter().map(|d| d.subset.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn with_docs(&self, docs: Vec<Document>) -> Corpus {
        Corpus {
            vocab_size: self.vocab_size,
            separator: self.separator,
            byte_level: self.byte_level,
            docs,
        }
    }
}

/// Decode byte tokens to text, turning separators into newlines.
pub fn tokens_to_text(tokens: &[u32], separator: u32) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .map(|&t| {
            if t == separator {
                b'\n'
            } else {
                t.min(255) as u8
            }
        })
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
