use datarater_autodiff::{Tape, Var};

use super::{ModelConfig, Params, TokenBatch};
use crate::data::PackedSequence;
use crate::error::{Error, Result};

/// Non-causal scorer: each position sees its token and the following one,
/// a tanh stack encodes the pair, mean pooling over the valid prefix and a
/// linear head give one score per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RaterParams {
    pub config: ModelConfig,
    pub params: Params,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden());
    let mut out = vec![
        ("embed".to_string(), vec![v, d]),
        ("pair.wa".to_string(), vec![d, h]),
        ("pair.wb".to_string(), vec![d, h]),
        ("pair.b".to_string(), vec![h]),
    ];
    for l in 1..cfg.depth {
        out.push((format!("layer{l}.w"), vec![h, h]));
        out.push((format!("layer{l}.b"), vec![h]));
    }
    // No head bias: weights, top-K and quantiles are all invariant to a
    // uniform score shift, so a bias would never receive a gradient.
    out.push(("head.w".to_string(), vec![h, 1]));
    out
}

pub fn rater_param_count(cfg: &ModelConfig) -> usize {
    let (v, d, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden());
    v * d + 2 * d * h + h + (cfg.depth - 1) * (h * h + h) + h
}

impl RaterParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg.clone(),
            params: Params::init(
                &layout(cfg),
                crate::seed::derive(seed, &[crate::seed::tag("rater")]),
            ),
        })
    }

    pub fn from_params(cfg: &ModelConfig, params: Params) -> Result<Self> {
        let want = layout(cfg);
        let ok = want.len() == params.len()
            && want
                .iter()
                .zip(params.names.iter().zip(&params.tensors))
                .all(|((n, s), (pn, t))| n == pn && s.as_slice() == t.shape());
        if !ok {
            return Err(Error::Checkpoint(
                "parameters do not match the rater layout".into(),
            ));
        }
        Ok(Self {
            config: cfg.clone(),
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Zeroes the head so every sequence scores 0 until training moves it.
    pub fn zero_head(&mut self) {
        if let Some(t) = self.params.get_mut("head.w") {
            t.data_mut().fill(0.0);
        }
    }

    /// Raw scores for many sequences, evaluated in chunks.
    pub fn score_all(&self, seqs: &[PackedSequence], chunk: usize) -> Result<Vec<f64>> {
        let refs: Vec<&PackedSequence> = seqs.iter().collect();
        score_sequences(self, &refs, chunk)
    }
}

/// Scores, shape `[n_seqs]`, differentiable w.r.t. the parameter nodes.
pub fn rater_scores<'t>(
    cfg: &ModelConfig,
    params: &[Var<'t>],
    batch: &TokenBatch,
) -> Result<Var<'t>> {
    let mut it = params.iter().copied();
    let mut next = || {
        it.next()
            .ok_or_else(|| Error::Config("too few rater parameters".into()))
    };
    let embed = next()?;
    let (wa, wb, b) = (next()?, next()?, next()?);
    let e = embed.gather_rows(batch.inputs.clone())?;
    let en = embed.gather_rows(batch.next.clone())?;
    let mut h = e.matmul(wa)?.add(en.matmul(wb)?)?.add_row(b)?.tanh()?;
    for _ in 1..cfg.depth {
        let (w, bl) = (next()?, next()?);
        h = h.add(h.matmul(w)?.add_row(bl)?.tanh()?)?;
    }
    let pooled = h.segment_sum(batch.seq_len, batch.pool_weights.clone())?;
    let s = pooled.matmul(next()?)?;
    Ok(s.reshape(&[batch.n_seqs])?)
}

pub fn score_sequences(
    rater: &RaterParams,
    seqs: &[&PackedSequence],
    chunk: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for part in seqs.chunks(chunk.max(1)) {
        let batch = TokenBatch::for_scoring(part, rater.config.vocab_size)?;
        let tape = Tape::new();
        let p = rater.params.leaves(&tape)?;
        out.extend_from_slice(rater_scores(&rater.config, &p, &batch)?.value().data());
    }
    Ok(out)
}
