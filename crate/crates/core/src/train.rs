//! Plain language-model training with optional data selection: rater
//! weighting, rater top-K filtering or perplexity filtering.

use std::collections::HashMap;

use datarater_autodiff::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::analysis::baselines::{pplx_filter, PplxVariant};
use crate::curation::{topk_filter, DiscardPolicy};
use crate::data::{BatchSampler, PackedSequence};
use crate::error::{Error, Result};
use crate::inner::batch_weights;
use crate::models::{
    rater_scores, score_sequences, sequence_nll, InnerModelParams, ModelConfig, RaterParams,
    TokenBatch,
};
use crate::optim::{adamw_step, AdamState, AdamWConfig};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub opt: AdamWConfig,
    /// Steps between validation evaluations; the final step is always
    /// evaluated.
    pub eval_every: u64,
    /// Validation sequences used per evaluation (0 means all).
    pub eval_max_seqs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            opt: AdamWConfig {
                cosine_horizon: 5000,
                ..AdamWConfig::default()
            },
            eval_every: 100,
            eval_max_seqs: 0,
            seed: 0,
        }
    }
}

/// How each training batch is chosen and weighted.
#[derive(Clone, Copy, Debug)]
pub enum DataSelection<'a> {
    Uniform,
    /// Softmax-weighted loss from rater scores, nothing discarded.
    RaterWeighted(&'a RaterParams),
    RaterTopK {
        rater: &'a RaterParams,
        rho: f64,
    },
    Perplexity {
        reference: &'a InnerModelParams,
        variant: PplxVariant,
        rho: f64,
    },
}

impl DataSelection<'_> {
    fn rho(&self) -> Option<f64> {
        match self {
            DataSelection::RaterTopK { rho, .. } | DataSelection::Perplexity { rho, .. } => {
                Some(*rho)
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub val_nll: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: InnerModelParams,
    pub curve: Vec<CurvePoint>,
    pub train_losses: Vec<f64>,
    /// Tokens passed through the scorer, oversampled ones included.
    pub tokens_scored: u64,
}

impl TrainRun {
    pub fn final_val_nll(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.val_nll)
    }
}

/// Mean per-sequence NLL over (a prefix of) a split.
pub fn evaluate(model: &InnerModelParams, seqs: &[PackedSequence], max_seqs: usize) -> Result<f64> {
    let n = if max_seqs == 0 {
        seqs.len()
    } else {
        max_seqs.min(seqs.len())
    };
    if n == 0 {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let nll = model.nll_all(&seqs[..n], 64)?;
    Ok(nll.iter().sum::<f64>() / n as f64)
}

struct Cache(HashMap<u64, f64>);

impl Cache {
    fn scores(
        &mut self,
        seqs: &[&PackedSequence],
        f: impl FnOnce(&[&PackedSequence]) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let mut missing: Vec<&PackedSequence> = seqs
            .iter()
            .filter(|s| !self.0.contains_key(&s.id))
            .copied()
            .collect();
        missing.sort_by_key(|s| s.id);
        missing.dedup_by_key(|s| s.id);
        if !missing.is_empty() {
            let fresh = f(&missing)?;
            for (s, v) in missing.iter().zip(fresh) {
                self.0.insert(s.id, v);
            }
        }
        Ok(seqs.iter().map(|s| self.0[&s.id]).collect())
    }
}

pub fn train_lm(
    model_cfg: &ModelConfig,
    train: &[PackedSequence],
    val: &[PackedSequence],
    cfg: &TrainConfig,
    selection: DataSelection<'_>,
) -> Result<TrainRun> {
    cfg.opt.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut model = InnerModelParams::init(
        model_cfg,
        seed::derive(cfg.seed, &[seed::tag("train-init")]),
    )?;
    let mut opt = AdamState::new(&model.params.tensors);
    let mut sampler = BatchSampler::new(
        train.len(),
        seed::derive(cfg.seed, &[seed::tag("train-batches")]),
    )?;
    let policy = selection
        .rho()
        .map(|rho| DiscardPolicy::new(rho, cfg.batch_size))
        .transpose()?;
    let v = model_cfg.vocab_size;
    let mut cache = Cache(HashMap::new());
    let mut run = TrainRun {
        model: model.clone(),
        curve: Vec::new(),
        train_losses: Vec::with_capacity(cfg.steps as usize),
        tokens_scored: 0,
    };
    let eval_every = cfg.eval_every.max(1);
    for step in 0..cfg.steps {
        if step % eval_every == 0 {
            run.curve.push(CurvePoint {
                step,
                val_nll: evaluate(&model, val, cfg.eval_max_seqs)?,
            });
        }
        let drawn = sampler.sample(cfg.batch_size, selection.rho())?;
        let drawn_seqs: Vec<&PackedSequence> = drawn.indices.iter().map(|&i| &train[i]).collect();
        let kept: Vec<&PackedSequence> = match selection {
            DataSelection::Uniform | DataSelection::RaterWeighted(_) => drawn_seqs,
            DataSelection::RaterTopK { rater, .. } => {
                run.tokens_scored += drawn_seqs.iter().map(|s| s.seq_len() as u64).sum::<u64>();
                let scores = cache.scores(&drawn_seqs, |m| score_sequences(rater, m, 64))?;
                let keep = topk_filter(&scores, policy.as_ref().expect("policy for filtering"))?;
                keep.into_iter().map(|i| drawn_seqs[i]).collect()
            }
            DataSelection::Perplexity {
                reference, variant, ..
            } => {
                let scores = cache.scores(&drawn_seqs, |m| {
                    let owned: Vec<PackedSequence> = m.iter().map(|s| (*s).clone()).collect();
                    reference.nll_all(&owned, 64)
                })?;
                let keep = pplx_filter(
                    variant,
                    &scores,
                    policy.as_ref().expect("policy for filtering"),
                )?;
                keep.into_iter().map(|i| drawn_seqs[i]).collect()
            }
        };
        let batch = TokenBatch::new(&kept, v)?;
        let tape = Tape::new();
        let theta = model.params.leaves(&tape)?;
        let losses = sequence_nll(&tape, model_cfg, &theta, &batch)?;
        let loss = match selection {
            DataSelection::RaterWeighted(rater) => {
                let eta = rater.params.leaves(&tape)?;
                let w = batch_weights(rater_scores(&rater.config, &eta, &batch)?)?;
                losses.dot(w)?
            }
            // The mean written as a dot with uniform weights, so constant
            // rater scores reproduce this path bit for bit.
            _ => {
                losses.dot(tape.leaf(Tensor::full(&[batch.n_seqs], 1.0 / batch.n_seqs as f64))?)?
            }
        };
        run.train_losses.push(loss.item());
        let grads = tape.gradient_values(loss, &theta)?;
        adamw_step(
            &cfg.opt,
            cfg.opt.lr_at(step),
            &mut model.params.tensors,
            &mut opt,
            &grads,
        )?;
    }
    run.curve.push(CurvePoint {
        step: cfg.steps,
        val_nll: evaluate(&model, val, cfg.eval_max_seqs)?,
    });
    run.model = model;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub steps: u64,
    pub val_nll: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Fraction with the lowest final validation NLL among successful runs.
    pub best_rho: Option<f64>,
}

/// Default discard fractions for sweeps.
pub const DISCARD_FRACTIONS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

/// Trains one model per discard fraction on rater top-K filtered batches.
pub fn discard_sweep(
    model_cfg: &ModelConfig,
    train: &[PackedSequence],
    val: &[PackedSequence],
    rater: &RaterParams,
    fractions: &[f64],
    cfg: &TrainConfig,
) -> Result<SweepReport> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &rho in fractions {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Config(format!(
                "discard fraction {rho} outside [0, 1)"
            )));
        }
        let row = match train_lm(
            model_cfg,
            train,
            val,
            cfg,
            DataSelection::RaterTopK { rater, rho },
        ) {
            Ok(run) => SweepRow {
                rho,
                steps: cfg.steps,
                val_nll: run.final_val_nll(),
                error: None,
            },
            Err(e) => SweepRow {
                rho,
                steps: cfg.steps,
                val_nll: f64::NAN,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    let best_rho = rows
        .iter()
        .filter(|r| r.error.is_none() && r.val_nll.is_finite())
        .min_by(|a, b| a.val_nll.total_cmp(&b.val_nll))
        .map(|r| r.rho);
    Ok(SweepReport { rows, best_rho })
}
