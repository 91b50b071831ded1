//! FLOPs accounting and the compute-to-match metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::CurvePoint;

/// Training costs `6 · P · tokens`; rater inference costs
/// `2 · P_rater · tokens` over every scored token, oversampled ones
/// included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub model_params: u64,
    pub rater_params: u64,
    /// Tokens in one nominal training batch, `N · S`.
    pub tokens_per_step: u64,
    pub rho: f64,
}

impl FlopsModel {
    pub fn oversample_multiplier(&self) -> f64 {
        1.0 / (1.0 - self.rho)
    }

    pub fn train_flops_per_step(&self) -> f64 {
        6.0 * self.model_params as f64 * self.tokens_per_step as f64
    }

    pub fn rater_flops_per_step(&self) -> f64 {
        2.0 * self.rater_params as f64 * self.tokens_per_step as f64 * self.oversample_multiplier()
    }
}

/// `None` fields mean the filtered run never reached the baseline's final
/// validation NLL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeToMatch {
    pub matched_step: Option<u64>,
    pub step_fraction: Option<f64>,
    pub flops_fraction: Option<f64>,
    pub net_gain: Option<f64>,
}

fn check_sorted(curve: &[CurvePoint], name: &str) -> Result<()> {
    if curve.is_empty() {
        return Err(Error::Data(format!("{name} curve is empty")));
    }
    if curve.windows(2).any(|w| w[0].step >= w[1].step) {
        return Err(Error::Data(format!(
            "{name} curve steps are not strictly increasing"
        )));
    }
    Ok(())
}

pub fn compute_to_match(
    baseline: &[CurvePoint],
    filtered: &[CurvePoint],
    flops: &FlopsModel,
) -> Result<ComputeToMatch> {
    check_sorted(baseline, "baseline")?;
    check_sorted(filtered, "filtered")?;
    if !(0.0..1.0).contains(&flops.rho) {
        return Err(Error::Config(format!(
            "discard fraction {} outside [0, 1)",
            flops.rho
        )));
    }
    let last = baseline[baseline.len() - 1];
    if last.step == 0 {
        return Err(Error::Data("baseline curve has no training steps".into()));
    }
    let Some(hit) = filtered.iter().find(|p| p.val_nll <= last.val_nll) else {
        return Ok(ComputeToMatch {
            matched_step: None,
            step_fraction: None,
            flops_fraction: None,
            net_gain: None,
        });
    };
    let step_fraction = hit.step as f64 / last.step as f64;
    let train = flops.train_flops_per_step();
    let overhead = if train > 0.0 {
        flops.rater_flops_per_step() / train
    } else {
        0.0
    };
    let flops_fraction = step_fraction * (1.0 + overhead);
    Ok(ComputeToMatch {
        matched_step: Some(hit.step),
        step_fraction: Some(step_fraction),
        flops_fraction: Some(flops_fraction),
        net_gain: Some(1.0 - flops_fraction),
    })
}
