//! Inner language model, data rater and their shared parameter container.

mod batch;
mod checkpoint;
mod inner;
mod rater;

pub use batch::TokenBatch;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
pub use inner::{inner_param_count, next_token_nll, sequence_nll, InnerModelParams};
pub use rater::{rater_param_count, rater_scores, score_sequences, RaterParams};

use datarater_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixer {
    /// Running mean over the prefix.
    #[default]
    CumulativeMean,
    /// Single-head causal self-attention.
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub hidden_mult: usize,
    #[serde(default)]
    pub label: String,
    /// Inner model mixing layer; the rater ignores it.
    #[serde(default)]
    pub mixer: Mixer,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.seq_len < 2 || self.embed_dim == 0 || self.depth == 0 || self.hidden_mult == 0 {
            return Err(Error::Config(format!(
                "model {:?}: seq_len >= 2 and positive embed_dim, depth, hidden_mult required",
                self.label
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.embed_dim * self.hidden_mult
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Params {
    fn init(layout: &[(String, Vec<usize>)], seed: u64) -> Self {
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let mut rng = seed::rng(seed, &[seed::tag(name)]);
            let t = if shape.len() == 2 {
                let std = 1.0 / (shape[0] as f64).sqrt();
                let data = (0..shape[0] * shape[1])
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::new(shape.clone(), data).expect("layout shape matches data")
            } else {
                Tensor::zeros(shape)
            };
            names.push(name.clone());
            tensors.push(t);
        }
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Result<Vec<Var<'t>>> {
        Ok(self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<std::result::Result<_, _>>()?)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`Params::flatten`].
    pub fn with_flat(&self, flat: &[f64]) -> Result<Params> {
        if flat.len() != self.num_params() {
            return Err(Error::Config(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut pos = 0;
        for t in &mut out.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn bit_equal(&self, other: &Params) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
