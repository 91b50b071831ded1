use serde::{Deserialize, Serialize};

use super::Document;

/// A fixed-length token window holding one or more document pieces.
///
/// Valid tokens form a prefix of length `valid_len`; the rest is padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub id: u64,
    pub tokens: Vec<u32>,
    pub valid_len: usize,
    /// Start position of each packed piece, strictly increasing from 0.
    pub offsets: Vec<usize>,
    pub doc_ids: Vec<u64>,
    pub subsets: Vec<String>,
    /// Maximum noise level over the constituent pieces.
    pub noise: f64,
}

impl PackedSequence {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|i| i < self.valid_len).collect()
    }

    pub fn num_articles(&self) -> usize {
        self.offsets.len()
    }

    pub fn packing_density(&self) -> f64 {
        self.valid_len as f64 / self.tokens.len() as f64
    }

    pub fn piece_len(&self, i: usize) -> usize {
        let end = self.offsets.get(i + 1).copied().unwrap_or(self.valid_len);
        end - self.offsets[i]
    }

    /// Subset of the longest piece, first on ties.
    pub fn dominant_subset(&self) -> &str {
        let mut best = 0;
        for i in 1..self.offsets.len() {
            if self.piece_len(i) > self.piece_len(best) {
                best = i;
            }
        }
        &self.subsets[best]
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn validate(&self, vocab_size: usize) -> Result<(), String> {
        let s = self.tokens.len();
        if s < 2 {
            return Err(format!("sequence length {s} below 2"));
        }
        if self.valid_len == 0 || self.valid_len > s {
            return Err(format!("valid length {} outside 1..={s}", self.valid_len));
        }
        if self.offsets.is_empty() || self.offsets[0] != 0 {
            return Err("offsets must start at 0".into());
        }
        if self.offsets.windows(2).any(|w| w[0] >= w[1])
            || *self.offsets.last().unwrap() >= self.valid_len
        {
            return Err("offsets must increase strictly within the valid prefix".into());
        }
        if self.doc_ids.len() != self.offsets.len() || self.subsets.len() != self.offsets.len() {
            return Err("provenance does not match the number of pieces".into());
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(format!("token {t} outside vocabulary {vocab_size}"));
        }
        Ok(())
    }
}

struct Bin {
    tokens: Vec<u32>,
    offsets: Vec<usize>,
    doc_ids: Vec<u64>,
    subsets: Vec<String>,
    noise: f64,
}

/// Greedy first-fit packing into windows of `seq_len`. Documents longer than
/// a window are cut into window-sized chunks; padding uses `pad`.
/// Sequence ids count up from `first_id` in output order.
pub fn pack_sequences(
    docs: &[Document],
    seq_len: usize,
    pad: u32,
    first_id: u64,
) -> Vec<PackedSequence> {
    assert!(seq_len >= 2, "sequence length must be at least 2");
    let mut bins: Vec<Bin> = Vec::new();
    // Indices of bins with room left, in creation order.
    let mut open: Vec<usize> = Vec::new();
    for doc in docs {
        for piece in doc.tokens.chunks(seq_len) {
            let slot = open
                .iter()
                .position(|&b| seq_len - bins[b].tokens.len() >= piece.len());
            let b = match slot {
                Some(k) => open[k],
                None => {
                    bins.push(Bin {
                        tokens: Vec::with_capacity(seq_len),
                        offsets: Vec::new(),
                        doc_ids: Vec::new(),
                        subsets: Vec::new(),
                        noise: 0.0,
                    });
                    open.push(bins.len() - 1);
                    bins.len() - 1
                }
            };
            let bin = &mut bins[b];
            bin.offsets.push(bin.tokens.len());
            bin.tokens.extend_from_slice(piece);
            bin.doc_ids.push(doc.id);
            bin.subsets.push(doc.subset.clone());
            bin.noise = bin.noise.max(doc.noise);
            if bin.tokens.len() == seq_len {
                open.retain(|&o| o != b);
            }
        }
    }
    bins.into_iter()
        .enumerate()
        .map(|(i, mut bin)| {
            let valid_len = bin.tokens.len();
            bin.tokens.resize(seq_len, pad);
            PackedSequence {
                id: first_id + i as u64,
                tokens: bin.tokens,
                valid_len,
                offsets: bin.offsets,
                doc_ids: bin.doc_ids,
                subsets: bin.subsets,
                noise: bin.noise,
            }
        })
        .collect()
}
