use std::sync::Arc;

use crate::data::PackedSequence;
use crate::error::{Error, Result};

/// Flattened model inputs for a batch of equally long packed sequences.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub n_seqs: usize,
    pub seq_len: usize,
    /// Token at every position, `n_seqs * seq_len`.
    pub inputs: Arc<[usize]>,
    /// Token following each position (the position's own token when there
    /// is no valid successor).
    pub next: Arc<[usize]>,
    /// `-1 / count` at positions with a valid successor, else 0, so a
    /// weighted segment sum of log-probabilities yields the mean NLL.
    pub loss_weights: Arc<[f64]>,
    /// `1 / valid_len` over the valid prefix, else 0.
    pub pool_weights: Arc<[f64]>,
}

impl TokenBatch {
    /// Batch for language modelling; every sequence needs at least two
    /// valid tokens.
    pub fn new(seqs: &[&PackedSequence], vocab_size: usize) -> Result<Self> {
        Self::build(seqs, vocab_size, true)
    }

    /// Batch for scoring only; single-token sequences are accepted and get
    /// zero loss weights.
    pub fn for_scoring(seqs: &[&PackedSequence], vocab_size: usize) -> Result<Self> {
        Self::build(seqs, vocab_size, false)
    }

    fn build(seqs: &[&PackedSequence], vocab_size: usize, strict: bool) -> Result<Self> {
        let Some(first) = seqs.first() else {
            return Err(Error::Data("empty batch".into()));
        };
        let s = first.seq_len();
        let total = seqs.len() * s;
        let mut inputs = Vec::with_capacity(total);
        let mut next = Vec::with_capacity(total);
        let mut loss_weights = Vec::with_capacity(total);
        let mut pool_weights = Vec::with_capacity(total);
        for (k, q) in seqs.iter().enumerate() {
            if q.seq_len() != s {
                return Err(Error::Data(format!(
                    "sequence lengths differ: {} vs {s}",
                    q.seq_len()
                )));
            }
            if let Some(&t) = q.tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Data(format!(
                    "token {t} outside vocabulary {vocab_size}"
                )));
            }
            let valid = q.valid_len.min(s);
            if valid < 2 && (strict || valid == 0) {
                return Err(Error::EmptySequence(k));
            }
            let lw = if valid > 1 {
                -1.0 / (valid - 1) as f64
            } else {
                0.0
            };
            let pw = 1.0 / valid as f64;
            for i in 0..s {
                inputs.push(q.tokens[i] as usize);
                let has_next = i + 1 < valid;
                next.push(q.tokens[if has_next { i + 1 } else { i }] as usize);
                loss_weights.push(if has_next { lw } else { 0.0 });
                pool_weights.push(if i < valid { pw } else { 0.0 });
            }
        }
        Ok(Self {
            n_seqs: seqs.len(),
            seq_len: s,
            inputs: inputs.into(),
            next: next.into(),
            loss_weights: loss_weights.into(),
            pool_weights: pool_weights.into(),
        })
    }

    /// Batch from indices into a split.
    pub fn gather(split: &[PackedSequence], indices: &[usize], vocab_size: usize) -> Result<Self> {
        let refs: Vec<&PackedSequence> = indices
            .iter()
            .map(|&i| {
                split.get(i).ok_or_else(|| {
                    Error::Data(format!("index {i} outside split of {}", split.len()))
                })
            })
            .collect::<Result<_>>()?;
        Self::new(&refs, vocab_size)
    }

    pub fn rows(&self) -> usize {
        self.n_seqs * self.seq_len
    }
}
