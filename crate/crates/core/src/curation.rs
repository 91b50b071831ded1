//! Using a trained rater: batch top-K with oversampling, the empirical score
//! CDF, the per-item accept probability and a sharded streaming filter.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{oversample_size, PackedSequence};
use crate::error::{Error, Result};
use crate::models::{score_sequences, RaterParams};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscardPolicy {
    pub rho: f64,
    /// Nominal batch size N; also the number kept.
    pub n: usize,
}

impl DiscardPolicy {
    pub fn new(rho: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("nominal batch size must be positive".into()));
        }
        oversample_size(n, rho)?;
        Ok(Self { rho, n })
    }

    /// Oversampled batch size `B = ceil(N / (1 - rho))`.
    pub fn batch_size(&self) -> usize {
        oversample_size(self.n, self.rho).expect("validated on construction")
    }

    pub fn keep(&self) -> usize {
        self.n
    }
}

/// Indices of the `k` largest scores, ties to the lower index, returned in
/// input order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k.min(order.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Keeps the `K` highest-scoring items of an oversampled batch of size `B`.
pub fn topk_filter(scores: &[f64], policy: &DiscardPolicy) -> Result<Vec<usize>> {
    let b = policy.batch_size();
    if scores.len() != b {
        return Err(Error::Data(format!(
            "batch has {} items, policy expects {b}",
            scores.len()
        )));
    }
    Ok(top_k_indices(scores, policy.keep()))
}

/// Empirical CDF with the midpoint rule `F(s) = (#{< s} + #{= s} / 2) / M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCdf {
    sorted: Vec<f64>,
}

impl ScoreCdf {
    pub const MIN_SAMPLE: usize = 100;

    pub fn fit(sample: &[f64]) -> Result<Self> {
        Self::fit_with_min(sample, Self::MIN_SAMPLE)
    }

    pub fn fit_with_min(sample: &[f64], min: usize) -> Result<Self> {
        if sample.len() < min.max(1) {
            return Err(Error::Data(format!(
                "CDF sample of {} is below the minimum {min}",
                sample.len()
            )));
        }
        if sample.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite score in CDF sample".into()));
        }
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn eval(&self, s: f64) -> f64 {
        let below = self.sorted.partition_point(|&x| x < s);
        let upto = self.sorted.partition_point(|&x| x <= s);
        (below as f64 + 0.5 * (upto - below) as f64) / self.sorted.len() as f64
    }
}

/// Probability that an item at quantile `p` is among the top `k` of a batch
/// of `b` i.i.d. items: `Σ_{s<k} C(b-1, s) (1-p)^s p^(b-1-s)`.
pub fn accept_probability(p: f64, b: usize, k: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("quantile {p} outside [0, 1]")));
    }
    if k == 0 || k > b {
        return Err(Error::Config(format!("need 1 <= K <= B, got K={k}, B={b}")));
    }
    if k == b {
        return Ok(1.0);
    }
    let n = b - 1;
    if p == 1.0 {
        return Ok(1.0);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut log_c = 0.0;
    let mut terms = Vec::with_capacity(k);
    for s in 0..k {
        if s > 0 {
            log_c += ((n - s + 1) as f64).ln() - (s as f64).ln();
        }
        terms.push(log_c + s as f64 * lq + (n - s) as f64 * lp);
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    Ok((max + total.ln()).exp().clamp(0.0, 1.0))
}

/// Anything that can score packed sequences.
pub trait Scorer: Sync {
    fn score(&self, seqs: &[&PackedSequence]) -> Result<Vec<f64>>;
}

impl Scorer for RaterParams {
    fn score(&self, seqs: &[&PackedSequence]) -> Result<Vec<f64>> {
        score_sequences(self, seqs, 64)
    }
}

/// Precomputed scores looked up by sequence id.
#[derive(Clone, Debug, Default)]
pub struct ScoreTable(pub HashMap<u64, f64>);

impl Scorer for ScoreTable {
    fn score(&self, seqs: &[&PackedSequence]) -> Result<Vec<f64>> {
        seqs.iter()
            .map(|s| {
                self.0
                    .get(&s.id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("no score for sequence {}", s.id)))
            })
            .collect()
    }
}

/// Memoizes another scorer by sequence id.
pub struct CachedScorer<'a, S: Scorer> {
    inner: &'a S,
    cache: Mutex<HashMap<u64, f64>>,
}

impl<'a, S: Scorer> CachedScorer<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().map_or(0, |c| c.len())
    }
}

impl<S: Scorer> Scorer for CachedScorer<'_, S> {
    fn score(&self, seqs: &[&PackedSequence]) -> Result<Vec<f64>> {
        let missing: Vec<&PackedSequence> = {
            let cache = self
                .cache
                .lock()
                .map_err(|_| Error::Data("score cache poisoned".into()))?;
            let mut seen = std::collections::HashSet::new();
            seqs.iter()
                .filter(|s| !cache.contains_key(&s.id) && seen.insert(s.id))
                .copied()
                .collect()
        };
        let fresh = if missing.is_empty() {
            Vec::new()
        } else {
            self.inner.score(&missing)?
        };
        let mut cache = self
            .cache
            .lock()
            .map_err(|_| Error::Data("score cache poisoned".into()))?;
        for (s, v) in missing.iter().zip(fresh) {
            cache.insert(s.id, v);
        }
        Ok(seqs.iter().map(|s| cache[&s.id]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLogRow {
    pub sequence_id: u64,
    pub subset: String,
    pub raw_score: f64,
    pub quantile: f64,
    pub accept_prob: f64,
    pub kept: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamConfig {
    pub policy: DiscardPolicy,
    pub workers: usize,
    pub seed: u64,
    /// Merge shard outputs in shard order (deterministic) rather than in
    /// completion order.
    pub ordered: bool,
    /// Items per shard; fixed so results do not depend on `workers`.
    pub shard_size: usize,
}

impl StreamConfig {
    pub fn new(policy: DiscardPolicy, seed: u64) -> Self {
        Self {
            policy,
            workers: 1,
            seed,
            ordered: true,
            shard_size: 4096,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamResult {
    /// Input indices of kept items.
    pub kept: Vec<usize>,
    /// One row per item of every shard that completed.
    pub log: Vec<ScoreLogRow>,
    pub shard_errors: Vec<(usize, String)>,
}

struct ShardOut {
    shard: usize,
    kept: Vec<usize>,
    log: Vec<ScoreLogRow>,
}

fn run_shard<S: Scorer>(
    shard: usize,
    start: usize,
    items: &[PackedSequence],
    scorer: &S,
    cdf: &ScoreCdf,
    cfg: &StreamConfig,
) -> Result<ShardOut> {
    let refs: Vec<&PackedSequence> = items.iter().collect();
    let scores = scorer.score(&refs)?;
    let (b, k) = (cfg.policy.batch_size(), cfg.policy.keep());
    let mut rng = seed::rng(cfg.seed, &[seed::tag("stream-shard"), shard as u64]);
    let mut out = ShardOut {
        shard,
        kept: Vec::new(),
        log: Vec::with_capacity(items.len()),
    };
    for (j, (item, &score)) in items.iter().zip(&scores).enumerate() {
        if !score.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite score for sequence {}",
                item.id
            )));
        }
        let q = cdf.eval(score);
        let a = accept_probability(q, b, k)?;
        let kept = rng.random::<f64>() < a;
        if kept {
            out.kept.push(start + j);
        }
        out.log.push(ScoreLogRow {
            sequence_id: item.id,
            subset: item.dominant_subset().to_string(),
            raw_score: score,
            quantile: q,
            accept_prob: a,
            kept,
        });
    }
    Ok(out)
}

/// Keeps each item independently with `accept_probability(F(score), B, K)`.
/// Shards run on up to `workers` threads; a failing shard is reported and
/// the others continue.
pub fn stream_filter<S: Scorer>(
    items: &[PackedSequence],
    scorer: &S,
    cdf: &ScoreCdf,
    cfg: &StreamConfig,
) -> StreamResult {
    let size = cfg.shard_size.max(1);
    let n_shards = items.len().div_ceil(size);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<ShardOut>)>();
    let work = |tx: mpsc::Sender<(usize, Result<ShardOut>)>| loop {
        let shard = next.fetch_add(1, Ordering::SeqCst);
        if shard >= n_shards {
            break;
        }
        let start = shard * size;
        let end = (start + size).min(items.len());
        let res = run_shard(shard, start, &items[start..end], scorer, cdf, cfg);
        if tx.send((shard, res)).is_err() {
            break;
        }
    };
    let workers = cfg.workers.max(1).min(n_shards.max(1));
    if workers == 1 {
        work(tx);
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                let tx = tx.clone();
                s.spawn(|| work(tx));
            }
            drop(tx);
        });
    }
    let mut arrived: Vec<(usize, Result<ShardOut>)> = rx.into_iter().collect();
    if cfg.ordered {
        arrived.sort_by_key(|(shard, _)| *shard);
    }
    let mut result = StreamResult::default();
    for (shard, res) in arrived {
        match res {
            Ok(out) => {
                debug_assert_eq!(out.shard, shard);
                result.kept.extend(out.kept);
                result.log.extend(out.log);
            }
            Err(e) => result.shard_errors.push((shard, e.to_string())),
        }
    }
    result
}
