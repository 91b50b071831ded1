//! Experiment configuration: built-in profiles, JSON overlays and the
//! resolved copy written next to every run.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use datarater_core::analysis::baselines::PplxVariant;
use datarater_core::analysis::regression::LassoConfig;
use datarater_core::data::{CorpusSpec, MarkovSpec, SplitSpec};
use datarater_core::experiments::{FilterExperimentConfig, ToyConfig};
use datarater_core::meta::MetaTrainConfig;
use datarater_core::models::ModelConfig;
use datarater_core::optim::AdamWConfig;
use datarater_core::train::{TrainConfig, DISCARD_FRACTIONS};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Sized for a single workstation core; drives the acceptance runs.
    #[default]
    Desk,
    /// Seconds-long runs for tests and smoke checks.
    Ci,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: CorpusSpec,
    pub split: SplitSpec,
    pub seq_len: usize,
    /// Noise levels assigned round-robin to inner-train documents; the
    /// held-out and validation splits stay clean.
    pub inner_noise: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationConfig {
    pub rho: f64,
    /// Nominal batch size N behind the accept probability.
    pub batch_n: usize,
    /// Scores used to fit the CDF, drawn from the pool being filtered.
    pub cdf_sample: usize,
    pub ordered: bool,
    pub shard_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub train: TrainConfig,
    /// After the sweep, train a baseline and a filtered model at the
    /// selected fraction and report compute-to-match.
    pub compare: bool,
    pub compare_train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub run: TrainConfig,
    /// Rater top-K discard fraction; unset trains on uniform batches.
    pub rho: Option<f64>,
    /// Perplexity-filter baseline instead of the rater (needs `rho`).
    pub pplx_baseline: Option<PplxVariant>,
    /// Training for the perplexity reference model on the held-out split.
    pub reference: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeInput {
    pub dataset: String,
    pub baseline: PathBuf,
    pub filtered: PathBuf,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub lasso: LassoConfig,
    pub rho_grid: Vec<f64>,
    pub hist_bins: usize,
    /// Sequences scored for correlations and regression (0 means all).
    pub max_seqs: usize,
    pub compute: Vec<ComputeInput>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Run directories whose CSVs are charted; empty means the output
    /// directory itself.
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Copied into every nested seed when the config is resolved.
    pub seed: u64,
    pub workers: usize,
    /// Not part of the resolved copy, which is written inside it.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub data: DataConfig,
    pub inner_model: ModelConfig,
    pub rater: ModelConfig,
    pub meta: MetaTrainConfig,
    pub zero_head_init: bool,
    pub rater_checkpoint: Option<PathBuf>,
    pub curation: CurationConfig,
    pub sweep: SweepConfig,
    pub train: TrainSection,
    pub analysis: AnalysisConfig,
    pub toy: ToyConfig,
    /// Largest acceptable Spearman correlation between noise level and
    /// mean weight after toy meta-training; unset skips the check.
    pub toy_max_spearman: Option<f64>,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        desk()
    }
}

fn desk() -> ExperimentConfig {
    let f = FilterExperimentConfig::default();
    ExperimentConfig {
        profile: Profile::Desk,
        seed: 0,
        workers: 1,
        out: PathBuf::from("runs"),
        data: DataConfig {
            corpus: CorpusSpec::Markov(f.corpus.clone()),
            split: f.split.clone(),
            seq_len: f.inner_model.seq_len,
            inner_noise: vec![f.noise, 0.0],
        },
        inner_model: f.inner_model.clone(),
        rater: f.rater.clone(),
        meta: f.meta.clone(),
        zero_head_init: true,
        rater_checkpoint: None,
        curation: CurationConfig {
            rho: 0.5,
            batch_n: 32,
            cdf_sample: 2000,
            ordered: true,
            shard_size: 4096,
        },
        sweep: SweepConfig {
            fractions: DISCARD_FRACTIONS.to_vec(),
            train: f.sweep_train.clone(),
            compare: true,
            compare_train: f.train.clone(),
        },
        train: TrainSection {
            run: f.train.clone(),
            rho: None,
            pplx_baseline: None,
            reference: f.sweep_train.clone(),
        },
        analysis: AnalysisConfig {
            lasso: LassoConfig::default(),
            rho_grid: DISCARD_FRACTIONS.to_vec(),
            hist_bins: 20,
            max_seqs: 2000,
            compute: Vec::new(),
        },
        toy: ToyConfig::default(),
        toy_max_spearman: Some(-0.9),
        report: ReportConfig::default(),
    }
}

fn ci() -> ExperimentConfig {
    let vocab = 12;
    let seq_len = 12;
    let model = |label: &str| ModelConfig {
        vocab_size: vocab,
        seq_len,
        embed_dim: 4,
        depth: 1,
        hidden_mult: 2,
        label: label.into(),
        mixer: Default::default(),
    };
    let corpus = MarkovSpec {
        vocab_size: vocab,
        n_docs: 600,
        min_len: seq_len,
        max_len: seq_len,
        subsets: vec!["chain_a".into(), "chain_b".into()],
        branching: 2,
        smoothing: 0.05,
    };
    let meta = MetaTrainConfig {
        outer_steps: 6,
        n_models: 2,
        inner_batch: 8,
        outer_batch: 8,
        reset_period: 4,
        checkpoint_every: 2,
        probe_size: 32,
        meta_opt: AdamWConfig {
            lr: 1e-2,
            clip_norm: None,
            ..AdamWConfig::default()
        },
        inner_opt: AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        },
        ..MetaTrainConfig::default()
    };
    let train = |steps: u64| TrainConfig {
        steps,
        batch_size: 8,
        opt: AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        },
        eval_every: 5,
        eval_max_seqs: 32,
        seed: 0,
    };
    let mut toy = ToyConfig {
        corpus: MarkovSpec {
            n_docs: 400,
            ..corpus.clone()
        },
        inner_model: model("toy-inner"),
        rater: model("toy-rater"),
        noise_bins: 3,
        eval_batches: 4,
        meta: meta.clone(),
        ..ToyConfig::default()
    };
    toy.meta.probe_size = 32;
    let d = desk();
    ExperimentConfig {
        profile: Profile::Ci,
        data: DataConfig {
            corpus: CorpusSpec::Markov(corpus),
            seq_len,
            ..d.data
        },
        inner_model: model("inner"),
        rater: model("rater"),
        meta,
        curation: CurationConfig {
            batch_n: 8,
            cdf_sample: 100,
            shard_size: 128,
            ..d.curation
        },
        sweep: SweepConfig {
            train: train(10),
            compare_train: train(20),
            ..d.sweep
        },
        train: TrainSection {
            run: train(20),
            reference: train(10),
            ..d.train
        },
        analysis: AnalysisConfig {
            lasso: LassoConfig {
                folds: 3,
                repeats: 1,
                ..LassoConfig::default()
            },
            hist_bins: 10,
            max_seqs: 200,
            ..d.analysis
        },
        toy,
        toy_max_spearman: None,
        ..d
    }
}

impl Profile {
    pub fn config(self) -> ExperimentConfig {
        match self {
            Profile::Desk => desk(),
            Profile::Ci => ci(),
        }
    }
}

/// Overlays `patch` on `base`. Objects merge key by key; anything else
/// replaces. A corpus block that switches generator replaces wholesale so
/// fields of the old generator do not leak in.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let switches =
                matches!((b.get("generator"), p.get("generator")), (Some(x), Some(y)) if x != y);
            if switches {
                *b = p;
                return;
            }
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Overrides that come from flags and the two allowed environment
/// variables. Flags win over the environment.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Overrides {
    /// Fills unset fields from `DR_SEED` and `DR_OUT` via `lookup`.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> CliResult<Self> {
        if self.seed.is_none() {
            if let Some(s) = lookup("DR_SEED") {
                let v = s.trim().parse().map_err(|_| {
                    CliError::Config(format!("DR_SEED is not an unsigned integer: {s:?}"))
                })?;
                self.seed = Some(v);
            }
        }
        if self.out.is_none() {
            self.out = lookup("DR_OUT")
                .filter(|s| !s.is_empty())
                .map(PathBuf::from);
        }
        Ok(self)
    }
}

fn read_patch(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::Config(format!(
            "{}: top level must be an object",
            path.display()
        )));
    }
    Ok(v)
}

/// Profile defaults, then the config file, then overrides; validated and
/// resolved.
pub fn load(config: Option<&Path>, ov: &Overrides) -> CliResult<ExperimentConfig> {
    let patch = config.map(read_patch).transpose()?;
    let profile = match (ov.profile, patch.as_ref().and_then(|p| p.get("profile"))) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Config(format!("profile: {e}")))?,
        (None, None) => Profile::Desk,
    };
    let mut value = serde_json::to_value(profile.config()).expect("configs serialize");
    if let Some(p) = patch {
        merge(&mut value, p);
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.profile = profile;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(o) = &ov.out {
        cfg.out = o.clone();
    }
    if let Some(w) = ov.workers {
        cfg.workers = w;
    }
    cfg.resolve()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Pushes the top-level seed and worker count into nested configs and
    /// checks cross-field constraints.
    pub fn resolve(&mut self) -> CliResult<()> {
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        let s = self.seed;
        self.data.split.seed = s;
        self.meta.seed = s;
        self.meta.workers = self.workers;
        self.toy.seed = s;
        self.toy.meta.seed = s;
        self.toy.meta.workers = self.workers;
        self.sweep.train.seed = s;
        self.sweep.compare_train.seed = s;
        self.train.run.seed = s;
        self.train.reference.seed = s;
        self.analysis.lasso.seed = s;

        let v = self.inner_model.vocab_size;
        if self.rater.vocab_size != v
            || self.inner_model.seq_len != self.data.seq_len
            || self.rater.seq_len != self.data.seq_len
        {
            return Err(CliError::Config(
                "inner model, rater and data must agree on vocab_size and seq_len".into(),
            ));
        }
        if let CorpusSpec::Markov(m) = &self.data.corpus {
            if m.vocab_size != v {
                return Err(CliError::Config(format!(
                    "corpus vocab {} differs from model vocab {v}",
                    m.vocab_size
                )));
            }
        }
        if self
            .data
            .inner_noise
            .iter()
            .any(|n| !(0.0..=1.0).contains(n))
        {
            return Err(CliError::Config(
                "inner_noise levels must lie in [0, 1]".into(),
            ));
        }
        if self.train.pplx_baseline.is_some() && self.train.rho.is_none() {
            return Err(CliError::Config(
                "train.pplx_baseline needs train.rho".into(),
            ));
        }
        if self.analysis.hist_bins == 0 {
            return Err(CliError::Config(
                "analysis.hist_bins must be positive".into(),
            ));
        }
        self.inner_model.validate()?;
        self.rater.validate()?;
        self.meta.validate()?;
        self.toy.validate()?;
        Ok(())
    }

    /// The resolved copy written into every run directory.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize") + "\n"
    }
}
