//! The outer loop: a population of inner models, per-model meta-gradients
//! through T-step unrolls, per-model Adam on the rater, averaged candidate
//! updates and staggered resets.

use std::collections::HashSet;

use datarater_autodiff::{Tape, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PackedSequence;
use crate::error::{Error, Result};
use crate::inner::{update_inner_model, InnerModelState};
use crate::models::{sequence_nll, ModelConfig, RaterParams, TokenBatch};
use crate::optim::{adamw_delta, AdamState, AdamWConfig, TapeAdam};
use crate::seed;
use crate::stats::spearman;

/// How per-model meta-gradients become one rater update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    /// Each gradient goes through its member's own Adam; candidates are
    /// averaged.
    #[default]
    PerModelAdam,
    /// Gradients are averaged first and fed to one shared Adam state.
    AdamOfMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaTrainConfig {
    pub outer_steps: u64,
    pub unroll: usize,
    pub n_models: usize,
    pub inner_batch: usize,
    pub outer_batch: usize,
    /// Outer steps between inner-model reinitializations.
    pub reset_period: u64,
    pub meta_opt: AdamWConfig,
    pub inner_opt: AdamWConfig,
    pub seed: u64,
    /// Outer steps between rater checkpoints; 0 means `outer_steps / 16`.
    pub checkpoint_every: u64,
    pub probe_size: usize,
    pub update_order: UpdateOrder,
    /// One outer batch per step shared by every member instead of one per
    /// member.
    pub shared_outer_batch: bool,
    /// Threads for the per-member unrolls; results do not depend on it.
    pub workers: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            outer_steps: 2000,
            unroll: 2,
            n_models: 4,
            inner_batch: 32,
            outer_batch: 32,
            reset_period: 500,
            meta_opt: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.1,
                warmup_steps: 100,
                clip_norm: Some(0.01),
                ..AdamWConfig::default()
            },
            inner_opt: AdamWConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            probe_size: 256,
            update_order: UpdateOrder::PerModelAdam,
            shared_outer_batch: false,
            workers: 1,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8].contains(&self.unroll) {
            return Err(Error::Config(format!(
                "unroll must be one of 1, 2, 4, 8; got {}",
                self.unroll
            )));
        }
        if self.n_models == 0
            || self.inner_batch == 0
            || self.outer_batch == 0
            || self.reset_period == 0
        {
            return Err(Error::Config(
                "n_models, inner_batch, outer_batch and reset_period must be positive".into(),
            ));
        }
        self.meta_opt.validate()?;
        self.inner_opt.validate()
    }

    pub fn cadence(&self) -> u64 {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            (self.outer_steps / 16).max(1)
        }
    }
}

/// One population member: an inner model, its age and its own meta-Adam.
#[derive(Clone, Debug)]
pub struct Member {
    pub state: InnerModelState,
    pub age: u64,
    pub meta_opt: AdamState,
    pub resets: u64,
    pub needs_reset: bool,
}

#[derive(Clone, Debug)]
pub struct PopulationState {
    pub inner_config: ModelConfig,
    pub members: Vec<Member>,
    pub rater: RaterParams,
    pub shared_meta_opt: AdamState,
    pub step: u64,
}

fn member_seed(base: u64, index: usize, generation: u64) -> u64 {
    seed::derive(base, &[seed::tag("member"), index as u64, generation])
}

impl PopulationState {
    /// Fresh members with ages `⌊i·R/N⌋`.
    pub fn new(
        inner_config: &ModelConfig,
        rater: RaterParams,
        cfg: &MetaTrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let members = (0..cfg.n_models)
            .map(|i| {
                Ok(Member {
                    state: InnerModelState::fresh(inner_config, member_seed(cfg.seed, i, 0))?,
                    age: (i as u64 * cfg.reset_period) / cfg.n_models as u64,
                    meta_opt: AdamState::new(&rater.params.tensors),
                    resets: 0,
                    needs_reset: false,
                })
            })
            .collect::<Result<_>>()?;
        let shared_meta_opt = AdamState::new(&rater.params.tensors);
        Ok(Self {
            inner_config: inner_config.clone(),
            members,
            rater,
            shared_meta_opt,
            step: 0,
        })
    }

    pub fn ages(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.age).collect()
    }
}

/// Result of differentiating the outer loss through one member's unroll.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grads: Vec<Tensor>,
    pub next_state: InnerModelState,
    pub inner_nll: f64,
    pub outer_nll: f64,
}

/// Gradient of the mean outer NLL after `inner_batches.len()` weighted
/// inner steps, with respect to the rater parameters.
pub fn meta_gradient(
    state: &InnerModelState,
    rater: &RaterParams,
    inner_batches: &[TokenBatch],
    outer_batch: &TokenBatch,
    inner_opt: &AdamWConfig,
) -> Result<MetaGradient> {
    let tape = Tape::new();
    let eta = rater.params.leaves(&tape)?;
    let start = TapeAdam::from_state(&tape, &state.model.params.tensors, &state.opt)?;
    let lr = inner_opt.lr_at(state.opt.t);
    let cfg = &state.model.config;
    let (end, steps) = update_inner_model(
        &tape,
        cfg,
        &rater.config,
        inner_opt,
        lr,
        start,
        &eta,
        inner_batches,
    )?;
    let outer = sequence_nll(&tape, cfg, &end.params, outer_batch)?.mean()?;
    let grads = tape.gradient_values(outer, &eta)?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite meta-gradient".into()));
    }
    let mut model = state.model.clone();
    model.params.tensors = end.param_values();
    let inner_nll = if steps.is_empty() {
        f64::NAN
    } else {
        steps.iter().map(|s| s.mean_nll).sum::<f64>() / steps.len() as f64
    };
    Ok(MetaGradient {
        grads,
        next_state: InnerModelState {
            model,
            opt: end.state_values(),
        },
        inner_nll,
        outer_nll: outer.item(),
    })
}

/// Read-only views of the inner-train and outer held-out splits.
#[derive(Clone, Copy, Debug)]
pub struct MetaData<'a> {
    pub inner: &'a [PackedSequence],
    pub outer: &'a [PackedSequence],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStepRecord {
    pub outer_step: u64,
    pub model_id: usize,
    /// L2 norm of this member's candidate rater update (NaN if excluded).
    pub meta_update_norm: f64,
    pub inner_nll: f64,
    pub outer_nll: f64,
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub records: Vec<ModelStepRecord>,
    pub reset: Vec<usize>,
}

fn l2(ts: &[Tensor]) -> f64 {
    ts.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

struct Draw {
    inner: Vec<Vec<usize>>,
    outer: Vec<usize>,
}

fn draw(cfg: &MetaTrainConfig, step: u64, member: usize, data: &MetaData<'_>) -> Draw {
    let mut rng = seed::rng(cfg.seed, &[seed::tag("meta-batches"), step, member as u64]);
    let inner = (0..cfg.unroll)
        .map(|_| {
            (0..cfg.inner_batch)
                .map(|_| rng.random_range(0..data.inner.len()))
                .collect()
        })
        .collect();
    let outer_member = if cfg.shared_outer_batch {
        u64::MAX
    } else {
        member as u64
    };
    let mut orng = seed::rng(cfg.seed, &[seed::tag("outer-batch"), step, outer_member]);
    let outer = (0..cfg.outer_batch)
        .map(|_| orng.random_range(0..data.outer.len()))
        .collect();
    Draw { inner, outer }
}

fn run_member(
    member: &Member,
    rater: &RaterParams,
    draw: &Draw,
    data: &MetaData<'_>,
    cfg: &MetaTrainConfig,
) -> Result<MetaGradient> {
    let v = rater.config.vocab_size;
    let inner: Vec<TokenBatch> = draw
        .inner
        .iter()
        .map(|idx| TokenBatch::gather(data.inner, idx, v))
        .collect::<Result<_>>()?;
    let outer = TokenBatch::gather(data.outer, &draw.outer, v)?;
    meta_gradient(&member.state, rater, &inner, &outer, &cfg.inner_opt)
}

/// Reinitializes members whose age reached `reset_period` or that were
/// flagged; their meta-optimizer state is kept. Returns the reset indices.
pub fn maybe_reset(
    pop: &mut PopulationState,
    reset_period: u64,
    base_seed: u64,
) -> Result<Vec<usize>> {
    let mut reset = Vec::new();
    for (i, m) in pop.members.iter_mut().enumerate() {
        if m.age >= reset_period || m.needs_reset {
            m.resets += 1;
            m.state =
                InnerModelState::fresh(&pop.inner_config, member_seed(base_seed, i, m.resets))?;
            m.age = 0;
            m.needs_reset = false;
            reset.push(i);
        }
    }
    Ok(reset)
}

/// One outer step over the whole population.
pub fn meta_step(
    pop: &mut PopulationState,
    data: &MetaData<'_>,
    cfg: &MetaTrainConfig,
) -> Result<StepReport> {
    let k = pop.step;
    let draws: Vec<Draw> = (0..pop.members.len())
        .map(|i| draw(cfg, k, i, data))
        .collect();
    let results: Vec<Result<MetaGradient>> = if cfg.workers > 1 && pop.members.len() > 1 {
        let rater = &pop.rater;
        let members = &pop.members;
        std::thread::scope(|s| {
            let handles: Vec<_> = members
                .iter()
                .zip(&draws)
                .map(|(m, d)| s.spawn(move || run_member(m, rater, d, data, cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Numerical("member task panicked".into())))
                })
                .collect()
        })
    } else {
        pop.members
            .iter()
            .zip(&draws)
            .map(|(m, d)| run_member(m, &pop.rater, d, data, cfg))
            .collect()
    };

    let lr = cfg.meta_opt.lr_at(k);
    let eta = pop.rater.params.tensors.clone();
    let mut deltas: Vec<Vec<Tensor>> = Vec::new();
    let mut grads_ok: Vec<Vec<Tensor>> = Vec::new();
    let mut records = Vec::with_capacity(results.len());
    for (i, res) in results.into_iter().enumerate() {
        let member = &mut pop.members[i];
        let mut record = ModelStepRecord {
            outer_step: k,
            model_id: i,
            meta_update_norm: f64::NAN,
            inner_nll: f64::NAN,
            outer_nll: f64::NAN,
            excluded: true,
        };
        match res {
            Ok(mg) => {
                record.inner_nll = mg.inner_nll;
                record.outer_nll = mg.outer_nll;
                let candidate = match cfg.update_order {
                    UpdateOrder::PerModelAdam => {
                        let mut opt = member.meta_opt.clone();
                        adamw_delta(&cfg.meta_opt, lr, &eta, &mut opt, &mg.grads).map(|d| (d, opt))
                    }
                    UpdateOrder::AdamOfMean => Ok((Vec::new(), member.meta_opt.clone())),
                };
                match candidate {
                    Ok((delta, opt)) => {
                        member.meta_opt = opt;
                        if cfg.update_order == UpdateOrder::PerModelAdam {
                            record.meta_update_norm = l2(&delta);
                            deltas.push(delta);
                        }
                        grads_ok.push(mg.grads);
                        record.excluded = false;
                    }
                    Err(e) if e.is_numerical() => member.needs_reset = true,
                    Err(e) => return Err(e),
                }
                member.state = mg.next_state;
            }
            Err(e) if e.is_numerical() => member.needs_reset = true,
            Err(e) => return Err(e),
        }
        records.push(record);
    }

    if cfg.update_order == UpdateOrder::AdamOfMean && !grads_ok.is_empty() {
        let mean = mean_tensors(&grads_ok)?;
        let delta = adamw_delta(&cfg.meta_opt, lr, &eta, &mut pop.shared_meta_opt, &mean)?;
        let norm = l2(&delta);
        for r in records.iter_mut().filter(|r| !r.excluded) {
            r.meta_update_norm = norm;
        }
        deltas.push(delta);
    }
    if !deltas.is_empty() {
        let mean = mean_tensors(&deltas)?;
        for (p, d) in pop.rater.params.tensors.iter_mut().zip(&mean) {
            *p = p.zip_map(d, |p, d| p + d)?;
        }
    }
    for m in &mut pop.members {
        m.age += 1;
    }
    pop.step += 1;
    let reset = maybe_reset(pop, cfg.reset_period, cfg.seed)?;
    Ok(StepReport {
        step: k,
        records,
        reset,
    })
}

fn mean_tensors(sets: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let inv = 1.0 / sets.len() as f64;
    let mut acc = sets[0].clone();
    for set in &sets[1..] {
        for (a, b) in acc.iter_mut().zip(set) {
            *a = a.zip_map(b, |x, y| x + y)?;
        }
    }
    Ok(acc.into_iter().map(|t| t.map(|x| x * inv)).collect())
}

/// Per-step norms and losses plus probe-set score checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaDiagnostics {
    pub records: Vec<ModelStepRecord>,
    pub checkpoint_steps: Vec<u64>,
    pub probe_scores: Vec<Vec<f64>>,
    /// Document ids seen in inner batches and in outer batches.
    pub inner_doc_ids: HashSet<u64>,
    pub outer_doc_ids: HashSet<u64>,
    pub resets: Vec<(u64, usize)>,
}

impl MetaDiagnostics {
    /// Spearman correlation of probe scores between every pair of
    /// checkpoints; 0 where either side is constant.
    #[allow(clippy::needless_range_loop)]
    pub fn autocorrelation(&self) -> Vec<Vec<f64>> {
        let n = self.probe_scores.len();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                out[i][j] = if i == j {
                    1.0
                } else {
                    spearman(&self.probe_scores[i], &self.probe_scores[j]).unwrap_or(0.0)
                };
            }
        }
        out
    }

    /// Correlation between each checkpoint and the previous one, paired
    /// with the later checkpoint's step.
    pub fn adjacent_autocorrelation(&self) -> Vec<(u64, f64)> {
        (1..self.probe_scores.len())
            .map(|i| {
                let r = spearman(&self.probe_scores[i - 1], &self.probe_scores[i]).unwrap_or(0.0);
                (self.checkpoint_steps[i], r)
            })
            .collect()
    }

    /// Document ids that appeared in both inner and outer batches.
    pub fn leaked_doc_ids(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self
            .inner_doc_ids
            .intersection(&self.outer_doc_ids)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }

    pub fn all_norms_finite(&self) -> bool {
        self.records.iter().all(|r| r.meta_update_norm.is_finite())
    }
}

/// Observer callbacks from [`MetaTrainer::run`].
pub enum MetaEvent<'a> {
    Step(&'a StepReport),
    Checkpoint { step: u64, rater: &'a RaterParams },
}

/// Stepwise driver so callers can stop early and still keep diagnostics.
pub struct MetaTrainer<'a> {
    pub cfg: MetaTrainConfig,
    pub data: MetaData<'a>,
    pub population: PopulationState,
    pub diagnostics: MetaDiagnostics,
    probe: Vec<&'a PackedSequence>,
}

impl<'a> MetaTrainer<'a> {
    pub fn new(
        cfg: MetaTrainConfig,
        data: MetaData<'a>,
        inner_config: &ModelConfig,
        rater: RaterParams,
    ) -> Result<Self> {
        if data.inner.is_empty() || data.outer.is_empty() {
            return Err(Error::Data(
                "meta-training needs non-empty inner and outer splits".into(),
            ));
        }
        if inner_config.vocab_size != rater.config.vocab_size {
            return Err(Error::Config(
                "inner model and rater vocabularies differ".into(),
            ));
        }
        let population = PopulationState::new(inner_config, rater, &cfg)?;
        let n = cfg.probe_size.min(data.inner.len());
        let mut rng = seed::rng(cfg.seed, &[seed::tag("probe")]);
        let mut idx = sample_indices(&mut rng, data.inner.len(), n).into_vec();
        idx.sort_unstable();
        let probe = idx.into_iter().map(|i| &data.inner[i]).collect();
        Ok(Self {
            cfg,
            data,
            population,
            diagnostics: MetaDiagnostics::default(),
            probe,
        })
    }

    pub fn rater(&self) -> &RaterParams {
        &self.population.rater
    }

    fn audit(&mut self, step: u64) {
        for i in 0..self.population.members.len() {
            let d = draw(&self.cfg, step, i, &self.data);
            for &j in d.inner.iter().flatten() {
                self.diagnostics
                    .inner_doc_ids
                    .extend(&self.data.inner[j].doc_ids);
            }
            for &j in &d.outer {
                self.diagnostics
                    .outer_doc_ids
                    .extend(&self.data.outer[j].doc_ids);
            }
        }
    }

    pub fn step(
        &mut self,
        observer: &mut dyn FnMut(MetaEvent<'_>) -> Result<()>,
    ) -> Result<StepReport> {
        let k = self.population.step;
        self.audit(k);
        let report = meta_step(&mut self.population, &self.data, &self.cfg)?;
        self.diagnostics
            .records
            .extend(report.records.iter().cloned());
        self.diagnostics
            .resets
            .extend(report.reset.iter().map(|&i| (k, i)));
        observer(MetaEvent::Step(&report))?;
        let done = k + 1;
        if done.is_multiple_of(self.cfg.cadence()) || done == self.cfg.outer_steps {
            let scores = crate::models::score_sequences(&self.population.rater, &self.probe, 64)?;
            self.diagnostics.checkpoint_steps.push(done);
            self.diagnostics.probe_scores.push(scores);
            observer(MetaEvent::Checkpoint {
                step: done,
                rater: &self.population.rater,
            })?;
        }
        Ok(report)
    }

    pub fn run(&mut self, observer: &mut dyn FnMut(MetaEvent<'_>) -> Result<()>) -> Result<()> {
        while self.population.step < self.cfg.outer_steps {
            self.step(observer)?;
        }
        Ok(())
    }
}

/// Runs all outer steps and returns the trained rater with diagnostics.
pub fn meta_train(
    cfg: &MetaTrainConfig,
    data: MetaData<'_>,
    inner_config: &ModelConfig,
    rater: RaterParams,
) -> Result<(RaterParams, MetaDiagnostics)> {
    let mut t = MetaTrainer::new(cfg.clone(), data, inner_config, rater)?;
    t.run(&mut |_| Ok(()))?;
    Ok((t.population.rater, t.diagnostics))
}
