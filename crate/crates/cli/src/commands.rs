//! The subcommands. Each writes its CSVs into a run directory and finishes
//! with the resolved config and a manifest.

use std::path::{Path, PathBuf};

use datarater_core::analysis::baselines::PplxVariant;
use datarater_core::analysis::distributions::score_distributions;
use datarater_core::analysis::flops::{compute_to_match, ComputeToMatch, FlopsModel};
use datarater_core::analysis::heuristics::{extract_from_sequence, HeuristicVector, FEATURE_NAMES};
use datarater_core::analysis::regression::{correlate, lasso_fit};
use datarater_core::curation::{
    stream_filter, CachedScorer, DiscardPolicy, ScoreCdf, ScoreLogRow, Scorer, StreamConfig,
};
use datarater_core::data::{generate_corpus, write_packed, PackedSequence};
use datarater_core::experiments::{prepare, run_toy_experiment, PreparedData};
use datarater_core::meta::{MetaData, MetaDiagnostics, MetaEvent, MetaTrainer};
use datarater_core::models::{
    inner_param_count, load_checkpoint, save_checkpoint, ModelKind, RaterParams,
};
use datarater_core::seed;
use datarater_core::train::{discard_sweep, train_lm, CurvePoint, DataSelection, TrainRun};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::{column, csv_records, read_csv, RunDir};
use crate::report;

#[derive(Serialize)]
struct DiagnosticsRow {
    outer_step: u64,
    model_id: usize,
    meta_update_norm: f64,
    inner_nll: f64,
    outer_nll: f64,
}

#[derive(Serialize)]
struct AutocorrRow {
    step: u64,
    spearman_prev: f64,
}

#[derive(Serialize)]
struct ComputeRow {
    dataset: String,
    step_fraction: String,
    flops_fraction: String,
    net_gain: String,
}

fn or_undefined(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| x.to_string())
}

impl ComputeRow {
    fn new(dataset: &str, c: &ComputeToMatch) -> Self {
        Self {
            dataset: dataset.into(),
            step_fraction: or_undefined(c.step_fraction),
            flops_fraction: or_undefined(c.flops_fraction),
            net_gain: or_undefined(c.net_gain),
        }
    }
}

fn write_diagnostics(run: &mut RunDir, d: &MetaDiagnostics) -> CliResult<()> {
    let rows: Vec<DiagnosticsRow> = d
        .records
        .iter()
        .map(|r| DiagnosticsRow {
            outer_step: r.outer_step,
            model_id: r.model_id,
            meta_update_norm: r.meta_update_norm,
            inner_nll: r.inner_nll,
            outer_nll: r.outer_nll,
        })
        .collect();
    run.write_csv("diagnostics.csv", &rows)?;
    let ac: Vec<AutocorrRow> = d
        .adjacent_autocorrelation()
        .into_iter()
        .map(|(step, spearman_prev)| AutocorrRow {
            step,
            spearman_prev,
        })
        .collect();
    run.write_csv("autocorrelation.csv", &ac)
}

fn write_curve(run: &mut RunDir, name: &str, curve: &[CurvePoint]) -> CliResult<()> {
    run.write_csv(name, curve)
}

fn save_rater(run: &mut RunDir, name: &str, rater: &RaterParams) -> CliResult<()> {
    save_checkpoint(
        &run.file(&format!("{name}.json")),
        ModelKind::Rater,
        &rater.config,
        &rater.params,
    )?;
    run.track(&format!("{name}.json"))?;
    run.track(&format!("{name}.bin"))
}

/// Packed splits plus what the analysis needs from the raw corpus.
pub struct Data {
    pub prepared: PreparedData,
    pub separator: u32,
    pub subsets: Vec<String>,
}

pub fn load_data(cfg: &ExperimentConfig, run: &mut RunDir) -> CliResult<Data> {
    let corpus = generate_corpus(&cfg.data.corpus, cfg.seed)?;
    if corpus.vocab_size != cfg.inner_model.vocab_size {
        return Err(CliError::Config(format!(
            "corpus vocabulary {} differs from model vocabulary {}",
            corpus.vocab_size, cfg.inner_model.vocab_size
        )));
    }
    let prepared = prepare(
        &corpus,
        &cfg.data.split,
        cfg.data.seq_len,
        &cfg.data.inner_noise,
        cfg.seed,
    )?;
    run.input_hash("corpus", &prepared.corpus_hash);
    Ok(Data {
        prepared,
        separator: corpus.separator,
        subsets: corpus.subsets(),
    })
}

pub fn load_rater(
    cfg: &ExperimentConfig,
    flag: Option<&Path>,
    run: &mut RunDir,
) -> CliResult<RaterParams> {
    let path = flag.or(cfg.rater_checkpoint.as_deref()).ok_or_else(|| {
        CliError::Config("no rater checkpoint: set rater_checkpoint or pass --rater".into())
    })?;
    let ck = load_checkpoint(path)?;
    if ck.kind != ModelKind::Rater {
        return Err(CliError::Input(format!(
            "{} is not a rater checkpoint",
            path.display()
        )));
    }
    if ck.config.vocab_size != cfg.inner_model.vocab_size || ck.config.seq_len != cfg.data.seq_len {
        return Err(CliError::Config(format!(
            "rater checkpoint {} was trained for a different vocabulary or sequence length",
            path.display()
        )));
    }
    run.input_file(path)?;
    run.input_file(&path.with_extension("bin"))?;
    Ok(RaterParams::from_params(&ck.config, ck.params)?)
}

fn fresh_rater(cfg: &ExperimentConfig) -> CliResult<RaterParams> {
    let mut r = RaterParams::init(
        &cfg.rater,
        seed::derive(cfg.seed, &[seed::tag("cli-rater")]),
    )?;
    if cfg.zero_head_init {
        r.zero_head();
    }
    Ok(r)
}

#[derive(Serialize)]
struct ToyWeightRow {
    step: u64,
    noise: f64,
    weight: f64,
}

#[derive(Serialize)]
struct ToySpearmanRow {
    step: u64,
    spearman: f64,
}

/// Meta-trains on the noisy toy corpus and records per-bin weights.
/// Outputs are written before the invariant is checked.
pub fn cmd_toy(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let mut run = RunDir::create(&cfg.out, "toy")?;
    let report = run_toy_experiment(&cfg.toy)?;
    run.input_hash("corpus", &report.corpus_hash);
    let mut rows = Vec::new();
    for c in &report.checkpoints {
        for (&noise, &weight) in report.noise_levels.iter().zip(&c.bin_weights) {
            rows.push(ToyWeightRow {
                step: c.step,
                noise,
                weight,
            });
        }
    }
    run.write_csv("toy_weights.csv", &rows)?;
    let sp: Vec<ToySpearmanRow> = report
        .checkpoints
        .iter()
        .map(|c| ToySpearmanRow {
            step: c.step,
            spearman: c.spearman,
        })
        .collect();
    run.write_csv("toy_spearman.csv", &sp)?;
    write_diagnostics(&mut run, &report.diagnostics)?;
    save_rater(&mut run, "rater", &report.rater)?;
    let chart = report::toy_weights_chart(&[("toy".into(), run.file("toy_weights.csv"))])?;
    if let Some(svg) = chart {
        run.write("toy_weights.svg", svg.as_bytes())?;
    }

    let last = report.last();
    let (w0, w1) = (
        last.bin_weights[0],
        last.bin_weights[last.bin_weights.len() - 1],
    );
    run.fact("final_spearman", last.spearman);
    run.fact("noise0_weight", w0);
    run.fact("noise1_weight", w1);
    run.fact("norms_finite", report.diagnostics.all_norms_finite());
    let out = run.finish(cfg)?;

    if !report.diagnostics.all_norms_finite() {
        return Err(CliError::Invariant(
            "meta-update norms must all be finite".into(),
        ));
    }
    if let Some(max) = cfg.toy_max_spearman {
        if !(last.spearman <= max) {
            return Err(CliError::Invariant(format!(
                "spearman(noise, mean weight) = {:.4} must be <= {max}",
                last.spearman
            )));
        }
        if !(w0 > w1) {
            return Err(CliError::Invariant(format!(
                "noise-0 bin weight {w0:.6} must exceed noise-1 bin weight {w1:.6}"
            )));
        }
    }
    Ok(out)
}

/// Meta-trains a rater on the configured corpus and writes checkpoints at
/// the configured cadence.
pub fn cmd_meta_train(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let mut run = RunDir::create(&cfg.out, "meta-train")?;
    let data = load_data(cfg, &mut run)?;
    let p = &data.prepared;
    let md = MetaData {
        inner: &p.inner,
        outer: &p.outer,
    };
    let mut trainer = MetaTrainer::new(cfg.meta.clone(), md, &cfg.inner_model, fresh_rater(cfg)?)?;
    let mut saved = Vec::new();
    trainer.run(&mut |ev| {
        if let MetaEvent::Checkpoint { step, rater } = ev {
            saved.push((step, rater.clone()));
        }
        Ok(())
    })?;
    for (step, rater) in &saved {
        save_rater(&mut run, &format!("rater_step_{step:06}"), rater)?;
    }
    save_rater(&mut run, "rater", &trainer.population.rater)?;
    let d = &trainer.diagnostics;
    write_diagnostics(&mut run, d)?;
    run.fact("resets", d.resets.len());
    run.fact("norms_finite", d.all_norms_finite());
    let leaked = d.leaked_doc_ids();
    run.fact("leaked_doc_ids", leaked.len());
    let out = run.finish(cfg)?;
    if !leaked.is_empty() {
        return Err(CliError::Invariant(format!(
            "{} documents were seen by both inner and outer batches",
            leaked.len()
        )));
    }
    if !d.all_norms_finite() {
        return Err(CliError::Invariant(
            "meta-update norms must all be finite".into(),
        ));
    }
    Ok(out)
}

/// Flags of `filter` that override the curation section.
#[derive(Clone, Debug, Default)]
pub struct FilterFlags {
    pub rho: Option<f64>,
    pub cdf_sample: Option<usize>,
    pub ordered: Option<bool>,
}

/// Streams the inner-train pool through the rater and keeps each sequence
/// with its accept probability.
pub fn cmd_filter(
    cfg: &ExperimentConfig,
    rater: Option<&Path>,
    flags: &FilterFlags,
) -> CliResult<PathBuf> {
    let mut run = RunDir::create(&cfg.out, "filter")?;
    let data = load_data(cfg, &mut run)?;
    let rater = load_rater(cfg, rater, &mut run)?;
    let pool = &data.prepared.inner;
    let rho = flags.rho.unwrap_or(cfg.curation.rho);
    let cdf_n = flags
        .cdf_sample
        .unwrap_or(cfg.curation.cdf_sample)
        .min(pool.len());

    let scorer = CachedScorer::new(&rater);
    let mut rng = seed::rng(cfg.seed, &[seed::tag("cdf-sample")]);
    let idx = rand_indices(&mut rng, pool.len(), cdf_n);
    let sample: Vec<&PackedSequence> = idx.iter().map(|&i| &pool[i]).collect();
    let cdf = ScoreCdf::fit(&scorer.score(&sample)?)?;

    let mut sc = StreamConfig::new(
        DiscardPolicy::new(rho, cfg.curation.batch_n)?,
        seed::derive(cfg.seed, &[seed::tag("stream-filter")]),
    );
    sc.workers = cfg.workers;
    sc.ordered = flags.ordered.unwrap_or(cfg.curation.ordered);
    sc.shard_size = cfg.curation.shard_size;
    let result = stream_filter(pool, &scorer, &cdf, &sc);

    run.write_csv("score_log.csv", &result.log)?;
    let kept: Vec<PackedSequence> = result.kept.iter().map(|&i| pool[i].clone()).collect();
    write_packed(
        &run.file("filtered.drpk"),
        cfg.inner_model.vocab_size,
        &kept,
    )?;
    run.track("filtered.drpk")?;
    run.fact("rho", rho);
    run.fact("cdf_sample", cdf_n);
    run.fact("pool", pool.len());
    run.fact("kept", kept.len());
    run.fact("shard_errors", &result.shard_errors);
    let out = run.finish(cfg)?;
    if let Some((shard, msg)) = result.shard_errors.first() {
        return Err(CliError::Input(format!(
            "{} shard(s) failed; first was shard {shard}: {msg}",
            result.shard_errors.len()
        )));
    }
    Ok(out)
}

fn rand_indices(rng: &mut impl rand::Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn flops_model(
    cfg: &ExperimentConfig,
    rater_params: usize,
    batch_size: usize,
    rho: f64,
) -> FlopsModel {
    FlopsModel {
        model_params: inner_param_count(&cfg.inner_model) as u64,
        rater_params: rater_params as u64,
        tokens_per_step: (batch_size * cfg.data.seq_len) as u64,
        rho,
    }
}

/// Trains one model per discard fraction; optionally compares the selected
/// fraction against unfiltered training.
pub fn cmd_sweep(cfg: &ExperimentConfig, rater: Option<&Path>) -> CliResult<PathBuf> {
    let mut run = RunDir::create(&cfg.out, "sweep")?;
    let data = load_data(cfg, &mut run)?;
    let rater = load_rater(cfg, rater, &mut run)?;
    let p = &data.prepared;
    let report = discard_sweep(
        &cfg.inner_model,
        &p.inner,
        &p.validation,
        &rater,
        &cfg.sweep.fractions,
        &cfg.sweep.train,
    )?;
    run.write_csv("sweep.csv", &report.rows)?;
    run.fact("selected_rho", report.best_rho);
    if cfg.sweep.compare {
        let rho = report
            .best_rho
            .ok_or_else(|| CliError::Numerical("every sweep run failed".into()))?;
        let t = &cfg.sweep.compare_train;
        let base = train_lm(
            &cfg.inner_model,
            &p.inner,
            &p.validation,
            t,
            DataSelection::Uniform,
        )?;
        let filt = train_lm(
            &cfg.inner_model,
            &p.inner,
            &p.validation,
            t,
            DataSelection::RaterTopK { rater: &rater, rho },
        )?;
        write_curve(&mut run, "curve_baseline.csv", &base.curve)?;
        write_curve(&mut run, "curve_filtered.csv", &filt.curve)?;
        let c = compute_to_match(
            &base.curve,
            &filt.curve,
            &flops_model(cfg, rater.num_params(), t.batch_size, rho),
        )?;
        run.write_csv("compute.csv", &[ComputeRow::new("corpus", &c)])?;
        run.fact("matched_step", c.matched_step);
    }
    run.finish(cfg)
}

#[derive(Serialize)]
struct LossRow {
    step: u64,
    loss: f64,
}

fn selection_label(rho: Option<f64>, pplx: Option<PplxVariant>) -> String {
    match (rho, pplx) {
        (None, _) => "uniform".into(),
        (Some(r), None) => format!("rater_topk(rho={r})"),
        (Some(r), Some(v)) => format!("pplx_{v:?}(rho={r})").to_lowercase(),
    }
}

/// Trains one language model: uniform batches, rater top-K at `rho`, or a
/// perplexity-filter baseline.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    rater: Option<&Path>,
    rho_flag: Option<f64>,
) -> CliResult<PathBuf> {
    let mut run = RunDir::create(&cfg.out, "train")?;
    let data = load_data(cfg, &mut run)?;
    let p = &data.prepared;
    let rho = rho_flag.or(cfg.train.rho);
    let t = &cfg.train.run;
    let result: TrainRun = match (rho, cfg.train.pplx_baseline) {
        (None, _) => train_lm(
            &cfg.inner_model,
            &p.inner,
            &p.validation,
            t,
            DataSelection::Uniform,
        )?,
        (Some(rho), None) => {
            let rater = load_rater(cfg, rater, &mut run)?;
            train_lm(
                &cfg.inner_model,
                &p.inner,
                &p.validation,
                t,
                DataSelection::RaterTopK { rater: &rater, rho },
            )?
        }
        (Some(rho), Some(variant)) => {
            let reference = train_lm(
                &cfg.inner_model,
                &p.outer,
                &p.validation,
                &cfg.train.reference,
                DataSelection::Uniform,
            )?
            .model;
            let sel = DataSelection::Perplexity {
                reference: &reference,
                variant,
                rho,
            };
            train_lm(&cfg.inner_model, &p.inner, &p.validation, t, sel)?
        }
    };
    write_curve(&mut run, "curve.csv", &result.curve)?;
    let losses: Vec<LossRow> = result
        .train_losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRow {
            step: i as u64,
            loss,
        })
        .collect();
    run.write_csv("train_loss.csv", &losses)?;
    save_checkpoint(
        &run.file("model.json"),
        ModelKind::Inner,
        &cfg.inner_model,
        &result.model.params,
    )?;
    run.track("model.json")?;
    run.track("model.bin")?;
    run.fact("selection", selection_label(rho, cfg.train.pplx_baseline));
    run.fact("final_val_nll", result.final_val_nll());
    run.fact("tokens_scored", result.tokens_scored);
    run.finish(cfg)
}

/// CSV with an `id` column followed by the 23 heuristic features.
pub fn heuristics_csv(rows: &[(String, HeuristicVector)]) -> CliResult<Vec<u8>> {
    let mut header = vec!["id"];
    header.extend(FEATURE_NAMES);
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|(id, h)| {
            std::iter::once(id.clone())
                .chain(h.values.iter().map(|v| v.to_string()))
                .collect()
        })
        .collect();
    csv_records(&header, &records)
}

#[derive(Serialize)]
struct CorrelationRow<'a> {
    feature: &'a str,
    pearson_r: f64,
}

#[derive(Serialize)]
struct RegressionRow<'a> {
    feature: &'a str,
    coef: f64,
    zero_flag: bool,
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    subset: &'a str,
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
}

fn read_curve(path: &Path) -> CliResult<Vec<CurvePoint>> {
    let (h, rows) = read_csv(path)?;
    let steps = column(&h, &rows, "step")?;
    let nll = column(&h, &rows, "val_nll")?;
    Ok(steps
        .into_iter()
        .zip(nll)
        .map(|(s, v)| CurvePoint {
            step: s as u64,
            val_nll: v,
        })
        .collect())
}

/// Relates rater scores to heuristic features, reports per-subset score
/// distributions and the kept mixture, and compute-to-match for the
/// configured curve pairs.
pub fn cmd_analyze(cfg: &ExperimentConfig, rater: Option<&Path>) -> CliResult<PathBuf> {
    let mut run = RunDir::create(&cfg.out, "analyze")?;
    let data = load_data(cfg, &mut run)?;
    let rater = load_rater(cfg, rater, &mut run)?;
    let pool = &data.prepared.inner;
    let n = if cfg.analysis.max_seqs == 0 {
        pool.len()
    } else {
        cfg.analysis.max_seqs.min(pool.len())
    };
    let seqs = &pool[..n];
    let scores = rater.score_all(seqs, 64)?;
    let features: Vec<HeuristicVector> = seqs
        .iter()
        .map(|s| extract_from_sequence(s, data.separator))
        .collect();
    let ids: Vec<(String, HeuristicVector)> = seqs
        .iter()
        .zip(&features)
        .map(|(s, h)| (s.id.to_string(), h.clone()))
        .collect();
    run.write("heuristics.csv", &heuristics_csv(&ids)?)?;

    let x: Vec<Vec<f64>> = features.iter().map(|h| h.values.to_vec()).collect();
    let corr = correlate(&x, &scores)?;
    let rows: Vec<CorrelationRow> = FEATURE_NAMES
        .iter()
        .zip(&corr)
        .map(|(f, c)| CorrelationRow {
            feature: f,
            pearson_r: c.r,
        })
        .collect();
    run.write_csv("correlations.csv", &rows)?;

    let fit = lasso_fit(&x, &scores, &cfg.analysis.lasso)?;
    let rows: Vec<RegressionRow> = FEATURE_NAMES
        .iter()
        .zip(&fit.coefficients)
        .map(|(f, &coef)| RegressionRow {
            feature: f,
            coef,
            zero_flag: coef == 0.0,
        })
        .collect();
    run.write_csv("regression.csv", &rows)?;
    run.fact("lasso_r2", fit.r2);
    run.fact("lasso_cv_r2", &fit.cv_scores);

    let log: Vec<ScoreLogRow> = seqs
        .iter()
        .zip(&scores)
        .map(|(s, &raw_score)| ScoreLogRow {
            sequence_id: s.id,
            subset: s.dominant_subset().to_string(),
            raw_score,
            quantile: f64::NAN,
            accept_prob: f64::NAN,
            kept: true,
        })
        .collect();
    let dist = score_distributions(
        &log,
        &data.subsets,
        &cfg.analysis.rho_grid,
        cfg.analysis.hist_bins,
    )?;
    run.write_csv("mixture.csv", &dist.mixture)?;
    let mut hist = Vec::new();
    for (subset, counts) in &dist.histograms {
        for (j, &count) in counts.iter().enumerate() {
            hist.push(HistogramRow {
                subset,
                bin_lo: dist.edges[j],
                bin_hi: dist.edges[j + 1],
                count,
            });
        }
    }
    run.write_csv("histograms.csv", &hist)?;

    if !cfg.analysis.compute.is_empty() {
        let mut rows = Vec::new();
        for c in &cfg.analysis.compute {
            run.input_file(&c.baseline)?;
            run.input_file(&c.filtered)?;
            let base = read_curve(&c.baseline)?;
            let filt = read_curve(&c.filtered)?;
            let flops = flops_model(cfg, rater.num_params(), cfg.train.run.batch_size, c.rho);
            rows.push(ComputeRow::new(
                &c.dataset,
                &compute_to_match(&base, &filt, &flops)?,
            ));
        }
        run.write_csv("compute.csv", &rows)?;
    }
    run.finish(cfg)
}

/// Charts every recognised CSV found in the input directories.
pub fn cmd_report(cfg: &ExperimentConfig, inputs: &[PathBuf]) -> CliResult<PathBuf> {
    let inputs: Vec<PathBuf> = if !inputs.is_empty() {
        inputs.to_vec()
    } else if !cfg.report.inputs.is_empty() {
        cfg.report.inputs.clone()
    } else {
        vec![cfg.out.clone()]
    };
    let mut run = RunDir::create(&cfg.out, "report")?;
    let charts = report::build(&inputs)?;
    if charts.charts.is_empty() {
        return Err(CliError::Input(
            "no chartable CSVs in the input directories".into(),
        ));
    }
    for f in &charts.read {
        run.input_file(f)?;
    }
    for (name, svg) in &charts.charts {
        run.write(name, svg.as_bytes())?;
    }
    run.finish(cfg)
}
