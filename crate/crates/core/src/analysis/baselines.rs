//! Perplexity-filtering baselines. Per-sequence NLL stands in for
//! perplexity; exp is monotone so every ranking is unchanged.

use serde::{Deserialize, Serialize};

use crate::curation::DiscardPolicy;
use crate::data::PackedSequence;
use crate::error::{Error, Result};
use crate::models::InnerModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplxVariant {
    /// Keep the highest perplexity.
    Top,
    /// Keep the block centred on the batch median.
    Mid,
    /// Keep the lowest perplexity.
    Bot,
}

impl std::str::FromStr for PplxVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top" => Ok(PplxVariant::Top),
            "mid" => Ok(PplxVariant::Mid),
            "bot" => Ok(PplxVariant::Bot),
            other => Err(Error::Config(format!(
                "unknown perplexity variant {other:?}"
            ))),
        }
    }
}

pub fn perplexity_scores(
    reference: &InnerModelParams,
    seqs: &[PackedSequence],
) -> Result<Vec<f64>> {
    reference.nll_all(seqs, 64)
}

/// Indices kept from an oversampled batch, in input order. Sorting is by
/// (score, index) ascending; `Mid` keeps sorted ranks
/// `⌊(B-K)/2⌋ .. ⌊(B-K)/2⌋ + K - 1`.
pub fn pplx_filter(
    variant: PplxVariant,
    scores: &[f64],
    policy: &DiscardPolicy,
) -> Result<Vec<usize>> {
    let (b, k) = (policy.batch_size(), policy.keep());
    if scores.len() != b {
        return Err(Error::Data(format!(
            "batch has {} items, policy expects {b}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..b).collect();
    match variant {
        PplxVariant::Top => order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y))),
        _ => order.sort_by(|&x, &y| scores[x].total_cmp(&scores[y]).then(x.cmp(&y))),
    }
    let start = if variant == PplxVariant::Mid {
        (b - k) / 2
    } else {
        0
    };
    let mut kept = order[start..start + k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
