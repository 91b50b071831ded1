//! End-to-end experiment drivers built from the library pieces.

use serde::{Deserialize, Serialize};

use crate::data::{
    corrupt, generate_corpus, pack_sequences, split, BatchSampler, Corpus, CorpusSpec, MarkovSpec,
    PackedSequence, SplitSpec,
};
use crate::error::{Error, Result};
use crate::inner::batch_weight_values;
use crate::meta::{MetaData, MetaDiagnostics, MetaEvent, MetaTrainConfig, MetaTrainer};
use crate::models::{ModelConfig, RaterParams};
use crate::optim::AdamWConfig;
use crate::seed;
use crate::stats::spearman;

/// Packed splits ready for meta-training and evaluation.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab_size: usize,
    pub inner: Vec<PackedSequence>,
    pub outer: Vec<PackedSequence>,
    pub validation: Vec<PackedSequence>,
    pub corpus_hash: String,
}

/// Corrupts a share of documents in place. Documents are assigned noise
/// levels round-robin in a seeded order: `levels[j]` goes to every
/// `levels.len()`-th document.
pub fn corrupt_documents(corpus: &mut Corpus, levels: &[f64], seed: u64) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..corpus.docs.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::tag("noise-assignment")]));
    let v = corpus.vocab_size;
    for (rank, &i) in order.iter().enumerate() {
        let level = levels[rank % levels.len()];
        if level > 0.0 {
            corpus.docs[i] = corrupt(&corpus.docs[i], level, v, seed);
        }
    }
}

/// Splits a corpus, corrupts only the inner-train documents and packs
/// every split.
pub fn prepare(
    corpus: &Corpus,
    split_spec: &SplitSpec,
    seq_len: usize,
    inner_noise: &[f64],
    seed: u64,
) -> Result<PreparedData> {
    let mut parts = split(corpus, split_spec)?;
    if !inner_noise.is_empty() {
        corrupt_documents(&mut parts.inner_train, inner_noise, seed);
    }
    let pad = corpus.separator;
    let keep = |v: Vec<PackedSequence>| -> Vec<PackedSequence> {
        v.into_iter().filter(|s| s.valid_len >= 2).collect()
    };
    let inner = keep(pack_sequences(&parts.inner_train.docs, seq_len, pad, 0));
    let outer = keep(pack_sequences(
        &parts.outer_heldout.docs,
        seq_len,
        pad,
        1 << 40,
    ));
    let validation = keep(pack_sequences(
        &parts.validation.docs,
        seq_len,
        pad,
        2 << 40,
    ));
    if inner.is_empty() || outer.is_empty() || validation.is_empty() {
        return Err(Error::Data(
            "a split packed to zero usable sequences".into(),
        ));
    }
    Ok(PreparedData {
        vocab_size: corpus.vocab_size,
        inner,
        outer,
        validation,
        corpus_hash: corpus.content_hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub corpus: MarkovSpec,
    pub split: SplitSpec,
    /// Number of equally spaced noise levels from 0 to 1.
    pub noise_bins: usize,
    pub inner_model: ModelConfig,
    pub rater: ModelConfig,
    pub meta: MetaTrainConfig,
    /// Mixed batches used to estimate per-bin mean weights.
    pub eval_batches: usize,
    /// Start the rater with a zero head so every initial score is equal.
    pub zero_head_init: bool,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let vocab = 32;
        let seq_len = 32;
        let model = |label: &str, d, mult| ModelConfig {
            vocab_size: vocab,
            seq_len,
            embed_dim: d,
            depth: 1,
            hidden_mult: mult,
            label: label.to_string(),
            mixer: Default::default(),
        };
        Self {
            corpus: MarkovSpec {
                vocab_size: vocab,
                n_docs: 6000,
                min_len: seq_len,
                max_len: seq_len,
                subsets: vec!["chain_a".into(), "chain_b".into()],
                branching: 2,
                smoothing: 0.02,
            },
            split: SplitSpec {
                inner_train: 0.7,
                outer_heldout: 0.2,
                validation: 0.1,
                seed: 0,
            },
            noise_bins: 11,
            inner_model: model("toy-inner", 16, 2),
            rater: model("toy-rater", 16, 2),
            meta: MetaTrainConfig {
                outer_steps: 400,
                unroll: 2,
                n_models: 4,
                inner_batch: 32,
                outer_batch: 32,
                reset_period: 100,
                meta_opt: AdamWConfig {
                    lr: 1e-2,
                    weight_decay: 0.0,
                    warmup_steps: 20,
                    clip_norm: None,
                    ..AdamWConfig::default()
                },
                inner_opt: AdamWConfig {
                    lr: 1e-2,
                    ..AdamWConfig::default()
                },
                seed: 0,
                checkpoint_every: 25,
                probe_size: 256,
                ..MetaTrainConfig::default()
            },
            eval_batches: 64,
            zero_head_init: true,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn noise_levels(&self) -> Vec<f64> {
        let n = self.noise_bins.max(2);
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_bins < 2 {
            return Err(Error::Config("noise_bins must be at least 2".into()));
        }
        if self.corpus.vocab_size != self.inner_model.vocab_size
            || self.rater.vocab_size != self.inner_model.vocab_size
        {
            return Err(Error::Config(
                "corpus, inner model and rater vocabularies differ".into(),
            ));
        }
        if self.eval_batches == 0 {
            return Err(Error::Config("eval_batches must be positive".into()));
        }
        self.inner_model.validate()?;
        self.rater.validate()?;
        self.meta.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCheckpoint {
    pub step: u64,
    /// Mean softmax weight per noise bin within mixed batches.
    pub bin_weights: Vec<f64>,
    /// Spearman correlation between noise level and mean weight (0 when
    /// the weights are all equal).
    pub spearman: f64,
}

#[derive(Clone, Debug)]
pub struct ToyReport {
    pub noise_levels: Vec<f64>,
    pub checkpoints: Vec<ToyCheckpoint>,
    pub diagnostics: MetaDiagnostics,
    pub rater: RaterParams,
    pub corpus_hash: String,
}

impl ToyReport {
    pub fn last(&self) -> &ToyCheckpoint {
        self.checkpoints
            .last()
            .expect("the untrained checkpoint is always recorded")
    }
}

fn nearest_bin(noise: f64, levels: &[f64]) -> usize {
    let mut best = 0;
    for (i, l) in levels.iter().enumerate() {
        if (noise - l).abs() < (noise - levels[best]).abs() {
            best = i;
        }
    }
    best
}

/// Mean softmax weight each noise bin receives inside uniformly drawn
/// batches of `batch_size`. The same batches are used for every rater
/// evaluated with the same seed.
pub fn bin_weights(
    rater: &RaterParams,
    seqs: &[PackedSequence],
    levels: &[f64],
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let scores = rater.score_all(seqs, 128)?;
    let mut sampler =
        BatchSampler::new(seqs.len(), seed::derive(seed, &[seed::tag("bin-weights")]))?;
    let mut sum = vec![0.0; levels.len()];
    let mut count = vec![0usize; levels.len()];
    for _ in 0..n_batches {
        let b = sampler.sample(batch_size, None)?;
        let s: Vec<f64> = b.indices.iter().map(|&i| scores[i]).collect();
        let w = batch_weight_values(&s)?;
        for (&i, wi) in b.indices.iter().zip(w) {
            let bin = nearest_bin(seqs[i].noise, levels);
            sum[bin] += wi;
            count[bin] += 1;
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect())
}

fn toy_checkpoint(
    step: u64,
    rater: &RaterParams,
    data: &PreparedData,
    levels: &[f64],
    cfg: &ToyConfig,
) -> Result<ToyCheckpoint> {
    let w = bin_weights(
        rater,
        &data.inner,
        levels,
        cfg.eval_batches,
        cfg.meta.inner_batch,
        cfg.seed,
    )?;
    Ok(ToyCheckpoint {
        step,
        spearman: spearman(levels, &w).unwrap_or(0.0),
        bin_weights: w,
    })
}

/// Builds the toy corpus and splits; only inner-train documents are noisy.
pub fn prepare_toy_data(cfg: &ToyConfig) -> Result<PreparedData> {
    let corpus = generate_corpus(&CorpusSpec::Markov(cfg.corpus.clone()), cfg.seed)?;
    let mut split_spec = cfg.split.clone();
    split_spec.seed = seed::derive(cfg.seed, &[split_spec.seed]);
    prepare(
        &corpus,
        &split_spec,
        cfg.inner_model.seq_len,
        &cfg.noise_levels(),
        cfg.seed,
    )
}

/// Meta-trains a rater on the noisy toy corpus and tracks how its batch
/// weights order the noise bins over training.
pub fn run_toy_experiment(cfg: &ToyConfig) -> Result<ToyReport> {
    cfg.validate()?;
    let data = prepare_toy_data(cfg)?;
    let levels = cfg.noise_levels();
    let mut rater = RaterParams::init(
        &cfg.rater,
        seed::derive(cfg.seed, &[seed::tag("toy-rater")]),
    )?;
    if cfg.zero_head_init {
        rater.zero_head();
    }
    let mut meta = cfg.meta.clone();
    meta.seed = seed::derive(cfg.seed, &[meta.seed, seed::tag("toy-meta")]);
    let mut checkpoints = vec![toy_checkpoint(0, &rater, &data, &levels, cfg)?];
    let md = MetaData {
        inner: &data.inner,
        outer: &data.outer,
    };
    let mut trainer = MetaTrainer::new(meta, md, &cfg.inner_model, rater)?;
    trainer.run(&mut |ev| {
        if let MetaEvent::Checkpoint { step, rater } = ev {
            checkpoints.push(toy_checkpoint(step, rater, &data, &levels, cfg)?);
        }
        Ok(())
    })?;
    Ok(ToyReport {
        noise_levels: levels,
        checkpoints,
        diagnostics: trainer.diagnostics,
        rater: trainer.population.rater,
        corpus_hash: data.corpus_hash,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterExperimentConfig {
    pub corpus: MarkovSpec,
    pub split: SplitSpec,
    /// Share of inner-train documents that are corrupted.
    pub corrupt_fraction: f64,
    pub noise: f64,
    pub inner_model: ModelConfig,
    pub rater: ModelConfig,
    pub meta: MetaTrainConfig,
    pub sweep_fractions: Vec<f64>,
    pub sweep_train: crate::train::TrainConfig,
    pub train: crate::train::TrainConfig,
    /// Perplexity-filter baselines trained at the selected fraction.
    pub pplx_baselines: Vec<crate::analysis::baselines::PplxVariant>,
    pub zero_head_init: bool,
    pub seed: u64,
}

impl Default for FilterExperimentConfig {
    fn default() -> Self {
        let toy = ToyConfig::default();
        let train = |steps: u64| crate::train::TrainConfig {
            steps,
            batch_size: 32,
            opt: AdamWConfig {
                lr: 1e-2,
                cosine_horizon: steps,
                ..AdamWConfig::default()
            },
            eval_every: 20,
            eval_max_seqs: 256,
            seed: 0,
        };
        Self {
            corpus: MarkovSpec {
                n_docs: 8000,
                ..toy.corpus
            },
            split: toy.split,
            corrupt_fraction: 0.5,
            noise: 0.8,
            inner_model: toy.inner_model,
            rater: toy.rater,
            meta: MetaTrainConfig {
                outer_steps: 200,
                ..toy.meta
            },
            sweep_fractions: crate::train::DISCARD_FRACTIONS.to_vec(),
            sweep_train: train(300),
            train: train(600),
            pplx_baselines: Vec::new(),
            zero_head_init: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FilterReport {
    pub sweep: crate::train::SweepReport,
    pub selected_rho: f64,
    pub baseline: crate::train::TrainRun,
    pub filtered: crate::train::TrainRun,
    pub pplx: Vec<(
        crate::analysis::baselines::PplxVariant,
        crate::train::TrainRun,
    )>,
    pub compute: crate::analysis::flops::ComputeToMatch,
    pub flops: crate::analysis::flops::FlopsModel,
    pub rater: RaterParams,
    pub diagnostics: MetaDiagnostics,
}

/// Corrupts `corrupt_fraction` of the inner-train documents at one noise
/// level, meta-trains a rater, sweeps discard fractions, then compares
/// unfiltered training with top-K filtering at the selected fraction.
pub fn run_filter_experiment(cfg: &FilterExperimentConfig) -> Result<FilterReport> {
    use crate::analysis::flops::{compute_to_match, FlopsModel};
    use crate::train::{discard_sweep, train_lm, DataSelection};

    if !(0.0..=1.0).contains(&cfg.corrupt_fraction) || !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::Config(
            "corrupt_fraction and noise must lie in [0, 1]".into(),
        ));
    }
    let corpus = generate_corpus(&CorpusSpec::Markov(cfg.corpus.clone()), cfg.seed)?;
    // Noise levels assigned round-robin: `clean` zeros per `noisy` copies
    // of the level approximate the requested fraction.
    let noisy = (cfg.corrupt_fraction * 100.0).round() as usize;
    let mut levels = vec![cfg.noise; noisy];
    levels.extend(std::iter::repeat_n(0.0, 100 - noisy.min(100)));
    let mut split_spec = cfg.split.clone();
    split_spec.seed = seed::derive(cfg.seed, &[split_spec.seed]);
    let data = prepare(
        &corpus,
        &split_spec,
        cfg.inner_model.seq_len,
        &levels,
        cfg.seed,
    )?;

    let mut rater = RaterParams::init(
        &cfg.rater,
        seed::derive(cfg.seed, &[seed::tag("filter-rater")]),
    )?;
    if cfg.zero_head_init {
        rater.zero_head();
    }
    let mut meta = cfg.meta.clone();
    meta.seed = seed::derive(cfg.seed, &[meta.seed, seed::tag("filter-meta")]);
    let md = MetaData {
        inner: &data.inner,
        outer: &data.outer,
    };
    let mut trainer = MetaTrainer::new(meta, md, &cfg.inner_model, rater)?;
    trainer.run(&mut |_| Ok(()))?;
    let rater = trainer.population.rater.clone();

    let sweep = discard_sweep(
        &cfg.inner_model,
        &data.inner,
        &data.validation,
        &rater,
        &cfg.sweep_fractions,
        &cfg.sweep_train,
    )?;
    let selected_rho = sweep
        .best_rho
        .ok_or_else(|| Error::Numerical("every discard-sweep run failed".into()))?;
    let baseline = train_lm(
        &cfg.inner_model,
        &data.inner,
        &data.validation,
        &cfg.train,
        DataSelection::Uniform,
    )?;
    let filtered = train_lm(
        &cfg.inner_model,
        &data.inner,
        &data.validation,
        &cfg.train,
        DataSelection::RaterTopK {
            rater: &rater,
            rho: selected_rho,
        },
    )?;
    let mut pplx = Vec::new();
    if !cfg.pplx_baselines.is_empty() {
        // Reference model trained on the held-out split only.
        let reference = train_lm(
            &cfg.inner_model,
            &data.outer,
            &data.validation,
            &cfg.sweep_train,
            DataSelection::Uniform,
        )?
        .model;
        for &variant in &cfg.pplx_baselines {
            let run = train_lm(
                &cfg.inner_model,
                &data.inner,
                &data.validation,
                &cfg.train,
                DataSelection::Perplexity {
                    reference: &reference,
                    variant,
                    rho: selected_rho,
                },
            )?;
            pplx.push((variant, run));
        }
    }
    let flops = FlopsModel {
        model_params: crate::models::inner_param_count(&cfg.inner_model) as u64,
        rater_params: rater.num_params() as u64,
        tokens_per_step: (cfg.train.batch_size * cfg.inner_model.seq_len) as u64,
        rho: selected_rho,
    };
    let compute = compute_to_match(&baseline.curve, &filtered.curve, &flops)?;
    Ok(FilterReport {
        sweep,
        selected_rho,
        baseline,
        filtered,
        pplx,
        compute,
        flops,
        rater,
        diagnostics: trainer.diagnostics,
    })
}
