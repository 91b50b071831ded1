use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub inner_train: f64,
    pub outer_heldout: f64,
    pub validation: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplits {
    pub inner_train: Corpus,
    pub outer_heldout: Corpus,
    pub validation: Corpus,
}

impl CorpusSplits {
    /// Document ids appearing in more than one split.
    pub fn overlapping_ids(&self) -> Vec<u64> {
        use std::collections::HashSet;
        let ids = |c: &Corpus| c.docs.iter().map(|d| d.id).collect::<HashSet<_>>();
        let (a, b, c) = (
            ids(&self.inner_train),
            ids(&self.outer_heldout),
            ids(&self.validation),
        );
        let mut out: Vec<u64> = a
            .intersection(&b)
            .chain(a.intersection(&c))
            .chain(b.intersection(&c))
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Shuffle document order with the spec's seed and cut consecutive ranges of
/// `floor(fraction * n)` documents.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<CorpusSplits> {
    let fr = [spec.inner_train, spec.outer_heldout, spec.validation];
    if fr.iter().any(|&f| !(f > 0.0)) || fr.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split fractions {fr:?} must be positive and sum to at most 1"
        )));
    }
    let n = corpus.len();
    let sizes: Vec<usize> = fr
        .iter()
        .map(|f| (f * n as f64 + 1e-9).floor() as usize)
        .collect();
    if sizes.contains(&0) {
        return Err(Error::Data(format!(
            "{n} documents are too few for split fractions {fr:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(spec.seed, &[seed::tag("split")]));
    let mut parts = Vec::with_capacity(3);
    let mut start = 0;
    for size in sizes {
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        parts.push(corpus.with_docs(idx.into_iter().map(|i| corpus.docs[i].clone()).collect()));
        start += size;
    }
    let validation = parts.pop().expect("three parts");
    let outer_heldout = parts.pop().expect("three parts");
    let inner_train = parts.pop().expect("three parts");
    Ok(CorpusSplits {
        inner_train,
        outer_heldout,
        validation,
    })
}
