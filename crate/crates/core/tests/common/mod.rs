#![allow(dead_code)]

use datarater_core::data::PackedSequence;
use datarater_core::models::ModelConfig;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn config(v: usize, s: usize, d: usize, depth: usize, mult: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        seq_len: s,
        embed_dim: d,
        depth,
        hidden_mult: mult,
        label: String::new(),
        mixer: Default::default(),
    }
}

/// A single-piece sequence with `valid` random tokens followed by padding.
pub fn seq(id: u64, tokens: Vec<u32>, seq_len: usize) -> PackedSequence {
    let valid_len = tokens.len();
    let mut t = tokens;
    t.resize(seq_len, 0);
    PackedSequence {
        id,
        tokens: t,
        valid_len,
        offsets: vec![0],
        doc_ids: vec![id],
        subsets: vec!["s".into()],
        noise: 0.0,
    }
}

pub fn random_seqs(n: usize, v: usize, s: usize, seed: u64) -> Vec<PackedSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let valid = rng.random_range(2..=s);
            let toks = (0..valid).map(|_| rng.random_range(0..v as u32)).collect();
            seq(i as u64, toks, s)
        })
        .collect()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max)
}
