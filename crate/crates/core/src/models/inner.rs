use datarater_autodiff::{Tape, Tensor, Var};

use super::{Mixer, ModelConfig, Params, TokenBatch};
use crate::data::PackedSequence;
use crate::error::{Error, Result};

/// Parameters of the next-token model: embedding, residual blocks of
/// (mixing, tanh MLP), and an output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerModelParams {
    pub config: ModelConfig,
    pub params: Params,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden());
    let mut out = vec![("embed".to_string(), vec![v, d])];
    for b in 0..cfg.depth {
        if cfg.mixer == Mixer::Attention {
            for w in ["wq", "wk", "wv"] {
                out.push((format!("block{b}.{w}"), vec![d, d]));
            }
        }
        out.push((format!("block{b}.w1"), vec![d, h]));
        out.push((format!("block{b}.b1"), vec![h]));
        out.push((format!("block{b}.w2"), vec![h, d]));
        out.push((format!("block{b}.b2"), vec![d]));
    }
    out.push(("out.w".to_string(), vec![d, v]));
    out.push(("out.b".to_string(), vec![v]));
    out
}

/// Closed-form parameter count of the inner architecture.
pub fn inner_param_count(cfg: &ModelConfig) -> usize {
    let (v, d, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden());
    let attn = if cfg.mixer == Mixer::Attention {
        3 * d * d
    } else {
        0
    };
    v * d + cfg.depth * (attn + 2 * d * h + h + d) + d * v + v
}

impl InnerModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            config: cfg.clone(),
            params: Params::init(
                &layout(cfg),
                crate::seed::derive(seed, &[crate::seed::tag("inner")]),
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
                "parameters do not match the inner model layout".into(),
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

    /// Zeroes the output projection so every prediction is uniform.
    pub fn zero_output(&mut self) {
        for name in ["out.w", "out.b"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

fn causal_mask(n_seqs: usize, s: usize) -> Tensor {
    let mut data = vec![0.0; n_seqs * s * s];
    for b in 0..n_seqs {
        for i in 0..s {
            for j in i + 1..s {
                data[(b * s + i) * s + j] = -1e9;
            }
        }
    }
    Tensor::new(vec![n_seqs * s, s], data).expect("mask shape")
}

/// Per-sequence mean next-token NLL, shape `[n_seqs]`, differentiable
/// w.r.t. the parameter nodes (given in layout order).
pub fn sequence_nll<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    params: &[Var<'t>],
    batch: &TokenBatch,
) -> Result<Var<'t>> {
    let s = batch.seq_len;
    let d = cfg.embed_dim;
    let mut it = params.iter().copied();
    let mut next = || {
        it.next()
            .ok_or_else(|| Error::Config("too few inner parameters".into()))
    };
    let mut x = next()?.gather_rows(batch.inputs.clone())?;
    let mask = if cfg.mixer == Mixer::Attention {
        Some(tape.leaf(causal_mask(batch.n_seqs, s))?)
    } else {
        None
    };
    for _ in 0..cfg.depth {
        let mixed = match mask {
            None => x.causal_mean(s)?,
            Some(mask) => {
                let (wq, wk, wv) = (next()?, next()?, next()?);
                let q = x.matmul(wq)?;
                let k = x.matmul(wk)?;
                let v = x.matmul(wv)?;
                let att = q
                    .matmul_ex(k, false, true, batch.n_seqs)?
                    .scale(1.0 / (d as f64).sqrt())?
                    .add(mask)?
                    .softmax()?;
                att.matmul_ex(v, false, false, batch.n_seqs)?
            }
        };
        let u = x.add(mixed)?;
        let (w1, b1, w2, b2) = (next()?, next()?, next()?, next()?);
        let hdn = u.matmul(w1)?.add_row(b1)?.tanh()?;
        x = u.add(hdn.matmul(w2)?.add_row(b2)?)?;
    }
    let (wo, bo) = (next()?, next()?);
    let logp = x.matmul(wo)?.add_row(bo)?.log_softmax()?;
    let tok = logp.select_cols(batch.next.clone())?;
    Ok(tok.segment_sum(s, batch.loss_weights.clone())?)
}

/// Mean next-token NLL of one sequence, as a plain value.
pub fn next_token_nll(model: &InnerModelParams, seq: &PackedSequence) -> Result<f64> {
    let batch = TokenBatch::new(&[seq], model.config.vocab_size)?;
    let tape = Tape::new();
    let p = model.params.leaves(&tape)?;
    Ok(sequence_nll(&tape, &model.config, &p, &batch)?.item())
}

impl InnerModelParams {
    /// Per-sequence NLL of every sequence, evaluated in chunks.
    pub fn nll_all(&self, seqs: &[PackedSequence], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let refs: Vec<&PackedSequence> = part.iter().collect();
            let batch = TokenBatch::new(&refs, self.config.vocab_size)?;
            let tape = Tape::new();
            let p = self.params.leaves(&tape)?;
            out.extend_from_slice(
                sequence_nll(&tape, &self.config, &p, &batch)?
                    .value()
                    .data(),
            );
        }
        Ok(out)
    }
}
