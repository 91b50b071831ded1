//! The differentiable inner update: score a batch, softmax the scores into
//! weights, take the weighted gradient and apply AdamW, all on the tape.

use datarater_autodiff::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::models::{rater_scores, sequence_nll, InnerModelParams, ModelConfig, TokenBatch};
use crate::optim::{AdamState, AdamWConfig, TapeAdam};

/// Inner model parameters with their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerModelState {
    pub model: InnerModelParams,
    pub opt: AdamState,
}

impl InnerModelState {
    pub fn fresh(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let model = InnerModelParams::init(cfg, seed)?;
        let opt = AdamState::new(&model.params.tensors);
        Ok(Self { model, opt })
    }
}

/// Softmax over the batch axis.
pub fn batch_weights(scores: Var<'_>) -> Result<Var<'_>> {
    Ok(scores.softmax()?)
}

/// Plain-value softmax with the same arithmetic as the tape kernel.
pub fn batch_weight_values(scores: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let s = tape.leaf(Tensor::vector(scores.to_vec()))?;
    Ok(batch_weights(s)?.value().into_data())
}

/// A batch with its raw scores and normalized weights.
#[derive(Clone, Debug)]
pub struct WeightedBatch {
    pub batch: TokenBatch,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `g = Σ_i w_i ∇θ ℓ(x_i; θ)` as differentiable nodes, together with the
/// per-sequence losses.
pub fn weighted_grad<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    theta: &[Var<'t>],
    batch: &TokenBatch,
    weights: Var<'t>,
) -> Result<(Vec<Var<'t>>, Var<'t>)> {
    let losses = sequence_nll(tape, cfg, theta, batch)?;
    let loss = losses.dot(weights)?;
    let grads = tape.gradients(loss, theta)?;
    Ok((grads, losses))
}

/// One differentiable AdamW step.
pub fn optimizer_step<'t>(
    tape: &'t Tape,
    opt: &AdamWConfig,
    lr: f64,
    state: &TapeAdam<'t>,
    grads: &[Var<'t>],
) -> Result<TapeAdam<'t>> {
    state.step(tape, opt, lr, grads)
}

/// Summary of one unrolled inner step.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollStep {
    /// Unweighted mean of the batch losses.
    pub mean_nll: f64,
    pub weights: Vec<f64>,
}

/// Composes score → weights → weighted gradient → AdamW once per batch, so
/// the returned parameters depend on `eta` through the tape.
#[allow(clippy::too_many_arguments)]
pub fn update_inner_model<'t>(
    tape: &'t Tape,
    inner_cfg: &ModelConfig,
    rater_cfg: &ModelConfig,
    opt: &AdamWConfig,
    lr: f64,
    start: TapeAdam<'t>,
    eta: &[Var<'t>],
    batches: &[TokenBatch],
) -> Result<(TapeAdam<'t>, Vec<UnrollStep>)> {
    let mut state = start;
    let mut steps = Vec::with_capacity(batches.len());
    for batch in batches {
        let scores = rater_scores(rater_cfg, eta, batch)?;
        let weights = batch_weights(scores)?;
        let (grads, losses) = weighted_grad(tape, inner_cfg, &state.params, batch, weights)?;
        state = optimizer_step(tape, opt, lr, &state, &grads)?;
        let l = losses.value();
        steps.push(UnrollStep {
            mean_nll: l.sum() / l.numel() as f64,
            weights: weights.value().into_data(),
        });
    }
    if state.params.iter().any(|p| !p.value().is_finite()) {
        return Err(Error::Numerical(
            "inner unroll produced non-finite parameters".into(),
        ));
    }
    Ok((state, steps))
}
