use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Number of items to draw so that keeping `n` discards a fraction `rho`:
/// `ceil(n / (1 - rho))`.
pub fn oversample_size(n: usize, rho: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "discard fraction {rho} outside [0, 1)"
        )));
    }
    // The tolerance absorbs representation error, e.g. 128 / 0.1 * 0.9.
    Ok(((n as f64 / (1.0 - rho)) - 1e-9).ceil().max(n as f64) as usize)
}

/// Indices into a split, drawn uniformly with replacement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A seeded stream of batches over a split of `split_len` sequences.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    split_len: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(split_len: usize, seed: u64) -> Result<Self> {
        if split_len == 0 {
            return Err(Error::Data("cannot sample from an empty split".into()));
        }
        Ok(Self {
            split_len,
            rng: seed::rng(seed, &[seed::tag("batch-sampler")]),
        })
    }

    /// Draws `n` items, or `ceil(n / (1 - rho))` when oversampling.
    pub fn sample(&mut self, n: usize, oversample: Option<f64>) -> Result<Batch> {
        let size = match oversample {
            Some(rho) => oversample_size(n, rho)?,
            None => n,
        };
        let indices = (0..size)
            .map(|_| self.rng.random_range(0..self.split_len))
            .collect();
        Ok(Batch { indices })
    }
}

pub fn sample_batch(
    split_len: usize,
    n: usize,
    seed: u64,
    oversample: Option<f64>,
) -> Result<Batch> {
    BatchSampler::new(split_len, seed)?.sample(n, oversample)
}
