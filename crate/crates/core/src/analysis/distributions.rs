//! Per-subset score histograms and the mixture a global score cut induces.

use serde::{Deserialize, Serialize};

use crate::curation::{top_k_indices, ScoreLogRow};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureRow {
    pub subset: String,
    pub rho: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDistributions {
    /// `bins + 1` shared bin edges over the observed score range.
    pub edges: Vec<f64>,
    /// Counts per subset, in the order subsets were given.
    pub histograms: Vec<(String, Vec<usize>)>,
    pub mixture: Vec<MixtureRow>,
}

/// Histograms per subset and, for each discard fraction, the share of kept
/// items from each subset when the global top `round((1 - rho) M)` scores
/// are kept.
pub fn score_distributions(
    rows: &[ScoreLogRow],
    subsets: &[String],
    rho_grid: &[f64],
    bins: usize,
) -> Result<ScoreDistributions> {
    if rows.is_empty() || bins == 0 {
        return Err(Error::Data(
            "score distributions need rows and at least one bin".into(),
        ));
    }
    let index: Vec<usize> = rows
        .iter()
        .map(|r| {
            subsets
                .iter()
                .position(|s| *s == r.subset)
                .ok_or_else(|| Error::Data(format!("unknown subset label {:?}", r.subset)))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = rows.iter().map(|r| r.raw_score).collect();
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut histograms: Vec<(String, Vec<usize>)> =
        subsets.iter().map(|s| (s.clone(), vec![0; bins])).collect();
    for (s, &k) in scores.iter().zip(&index) {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        histograms[k].1[b] += 1;
    }
    let m = rows.len();
    let mut mixture = Vec::with_capacity(rho_grid.len() * subsets.len());
    for &rho in rho_grid {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Config(format!(
                "discard fraction {rho} outside [0, 1)"
            )));
        }
        let keep = (((1.0 - rho) * m as f64).round() as usize).clamp(1, m);
        let kept = top_k_indices(&scores, keep);
        let mut counts = vec![0usize; subsets.len()];
        for i in kept {
            counts[index[i]] += 1;
        }
        for (s, c) in subsets.iter().zip(counts) {
            mixture.push(MixtureRow {
                subset: s.clone(),
                rho,
                weight: c as f64 / keep as f64,
            });
        }
    }
    Ok(ScoreDistributions {
        edges,
        histograms,
        mixture,
    })
}
