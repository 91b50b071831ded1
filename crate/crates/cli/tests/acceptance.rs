//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails. Pass criterion numbers as arguments to
//! run a subset.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use datarater_autodiff::Tape;
use datarater_cli::commands::{cmd_toy, heuristics_csv};
use datarater_cli::config::Profile;
use datarater_core::analysis::heuristics::{extract_heuristics, PackingInfo};
use datarater_core::analysis::regression::{
    correlate, lasso_fit, lasso_path_fit, ols_fit, LassoConfig,
};
use datarater_core::curation::{
    accept_probability, stream_filter, top_k_indices, DiscardPolicy, ScoreCdf, ScoreTable,
    StreamConfig,
};
use datarater_core::data::{generate_corpus, PackedSequence};
use datarater_core::experiments::{
    prepare, run_filter_experiment, run_toy_experiment, FilterExperimentConfig,
};
use datarater_core::inner::InnerModelState;
use datarater_core::meta::meta_gradient;
use datarater_core::models::{
    inner_param_count, sequence_nll, ModelConfig, RaterParams, TokenBatch,
};
use datarater_core::optim::{adamw_step, AdamWConfig};
use datarater_core::train::{train_lm, DataSelection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn model(v: usize, s: usize, d: usize, mult: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        seq_len: s,
        embed_dim: d,
        depth: 1,
        hidden_mult: mult,
        label: String::new(),
        mixer: Default::default(),
    }
}

fn random_seqs(rng: &mut ChaCha8Rng, n: usize, v: usize, s: usize) -> Vec<PackedSequence> {
    (0..n as u64)
        .map(|id| {
            let valid = rng.random_range(2..=s);
            let mut tokens: Vec<u32> = (0..valid).map(|_| rng.random_range(0..v as u32)).collect();
            tokens.resize(s, 0);
            PackedSequence {
                id,
                tokens,
                valid_len: valid,
                offsets: vec![0],
                doc_ids: vec![id],
                subsets: vec!["s".into()],
                noise: 0.0,
            }
        })
        .collect()
}

fn batch(seqs: &[PackedSequence], v: usize) -> TokenBatch {
    let refs: Vec<&PackedSequence> = seqs.iter().collect();
    TokenBatch::new(&refs, v).unwrap()
}

fn c1_meta_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut shapes = Vec::new();
    let mut trial = 0;
    while shapes.len() < 3 {
        trial += 1;
        let v = rng.random_range(6..=32);
        let s = rng.random_range(6..=16);
        let icfg = model(v, s, rng.random_range(2..=6), 2);
        let rcfg = model(v, s, rng.random_range(2..=4), 2);
        if inner_param_count(&icfg) > 2000 {
            continue;
        }
        let opt = AdamWConfig {
            lr: 0.05,
            ..AdamWConfig::default()
        };
        let seqs = random_seqs(&mut rng, 24, v, s);
        // A few plain steps first so the Adam moments are nonzero.
        let mut st = InnerModelState::fresh(&icfg, trial).unwrap();
        for chunk in seqs[16..].chunks(4) {
            let b = batch(chunk, v);
            let t = Tape::new();
            let p = st.model.params.leaves(&t).unwrap();
            let l = sequence_nll(&t, &icfg, &p, &b).unwrap().mean().unwrap();
            let g = t.gradient_values(l, &p).unwrap();
            adamw_step(&opt, opt.lr, &mut st.model.params.tensors, &mut st.opt, &g).unwrap();
        }
        let rater = RaterParams::init(&rcfg, trial + 100).unwrap();
        let inner = [batch(&seqs[0..4], v), batch(&seqs[4..8], v)];
        let outer = batch(&seqs[8..16], v);
        let mg = meta_gradient(&st, &rater, &inner, &outer, &opt).unwrap();
        let analytic: Vec<f64> = mg.grads.iter().flat_map(|t| t.data().to_vec()).collect();
        let x0 = rater.params.flatten();
        let f = |x: &[f64]| {
            let r = RaterParams::from_params(&rcfg, rater.params.with_flat(x).unwrap()).unwrap();
            meta_gradient(&st, &r, &inner, &outer, &opt)
                .unwrap()
                .outer_nll
        };
        let eps = 1e-5;
        let mut x = x0.clone();
        for (i, a) in analytic.iter().enumerate() {
            x[i] = x0[i] + eps;
            let up = f(&x);
            x[i] = x0[i] - eps;
            let down = f(&x);
            x[i] = x0[i];
            let n = (up - down) / (2.0 * eps);
            worst = worst.max((a - n).abs() / (n.abs() + 1e-12));
        }
        shapes.push(format!("V{v}/S{s}/{}p", inner_param_count(&icfg)));
    }
    outcome(
        worst <= 1e-4,
        format!("max rel err {worst:.2e} over {}", shapes.join(", ")),
    )
}

fn c2_constant_scores() -> Outcome {
    let cfg = Profile::Desk.config();
    let corpus = generate_corpus(&cfg.data.corpus, 0).unwrap();
    let data = prepare(
        &corpus,
        &cfg.data.split,
        cfg.data.seq_len,
        &cfg.data.inner_noise,
        0,
    )
    .unwrap();
    let mut train = cfg.train.run.clone();
    train.steps = 5000;
    train.opt.cosine_horizon = 5000;
    train.eval_every = 500;
    train.eval_max_seqs = 128;
    let mut rater = RaterParams::init(&cfg.rater, 7).unwrap();
    rater.zero_head();
    let m = &cfg.inner_model;
    let a = train_lm(
        m,
        &data.inner,
        &data.validation,
        &train,
        DataSelection::Uniform,
    )
    .unwrap();
    let b = train_lm(
        m,
        &data.inner,
        &data.validation,
        &train,
        DataSelection::RaterWeighted(&rater),
    )
    .unwrap();
    let same = a.model.params.bit_equal(&b.model.params)
        && a.train_losses == b.train_losses
        && a.curve == b.curve;
    outcome(
        same,
        format!(
            "5000 steps, final val NLL {:.4} vs {:.4}",
            a.final_val_nll(),
            b.final_val_nll()
        ),
    )
}

fn c3_accept_probability() -> Outcome {
    let b = 16;
    let trials = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_z: f64 = 0.0;
    let mut fails = 0;
    let mut beyond = Vec::new();
    let mut scores = vec![0.0; b];
    for k in [4, 8, 12] {
        for i in 1..=19 {
            let p = i as f64 * 0.05;
            let mut kept = 0u64;
            for _ in 0..trials {
                // Our item has quantile p; the others are uniform draws.
                let at = rng.random_range(0..b);
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = if j == at { p } else { rng.random::<f64>() };
                }
                kept += u64::from(top_k_indices(&scores, k).contains(&at));
            }
            let q = accept_probability(p, b, k).unwrap();
            let f = kept as f64 / trials as f64;
            let se = (q * (1.0 - q) / trials as f64).sqrt();
            let z = if se > 0.0 {
                (f - q).abs() / se
            } else if f == q {
                0.0
            } else {
                f64::INFINITY
            };
            worst_z = worst_z.max(z);
            if z > 3.0 {
                fails += 1;
                beyond.push(format!("K={k} p={p:.2}: {f:.5} vs {q:.5}"));
            }
        }
    }
    outcome(fails == 0, format!("57 cells x {trials} trials, worst |z| {worst_z:.2}, {fails} cells beyond 3 SE {beyond:?}"))
}

fn c4_stream_filter() -> Outcome {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<PackedSequence> = (0..n as u64)
        .map(|id| PackedSequence {
            id,
            tokens: vec![1, 2],
            valid_len: 2,
            offsets: vec![0],
            doc_ids: vec![id],
            subsets: vec!["s".into()],
            noise: 0.0,
        })
        .collect();
    let raw: Vec<f64> = (0..n)
        .map(|_| rng.random::<f64>().ln() - rng.random::<f64>().ln())
        .collect();
    let table = ScoreTable(
        items
            .iter()
            .map(|s| s.id)
            .zip(raw.iter().copied())
            .collect::<HashMap<_, _>>(),
    );
    let cdf = ScoreCdf::fit(&raw).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    // N chosen so K/B equals 1 - rho exactly with B = 16.
    for (rho, nominal) in [(0.25, 12), (0.5, 8), (0.75, 4)] {
        let policy = DiscardPolicy::new(rho, nominal).unwrap();
        assert_eq!(policy.batch_size(), 16);
        let r = stream_filter(
            &items,
            &table,
            &cdf,
            &StreamConfig::new(policy, 40 + nominal as u64),
        );
        let frac = r.kept.len() as f64 / n as f64;
        let sigma = (rho * (1.0 - rho) / n as f64).sqrt();
        let z = (frac - (1.0 - rho)).abs() / sigma;
        pass &= z <= 3.0;
        let mut kept = [0u64; 20];
        let mut count = [0u64; 20];
        let mut prob = [0.0f64; 20];
        for row in &r.log {
            let bin = ((row.quantile * 20.0) as usize).min(19);
            count[bin] += 1;
            prob[bin] += row.accept_prob;
            kept[bin] += u64::from(row.kept);
        }
        let mut worst_bin: f64 = 0.0;
        for j in 0..20 {
            let m = count[j] as f64;
            let a = prob[j] / m;
            let se = (a * (1.0 - a) / m).sqrt();
            let d = (kept[j] as f64 / m - a).abs();
            let zb = if se > 0.0 {
                d / se
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            worst_bin = worst_bin.max(zb);
        }
        pass &= worst_bin <= 3.0 && r.shard_errors.is_empty();
        notes.push(format!(
            "rho {rho}: kept {frac:.4} (|z| {z:.2}), worst bin |z| {worst_bin:.2}"
        ));
    }
    outcome(pass, notes.join("; "))
}

fn c5_c7_toy() -> (Outcome, Outcome) {
    let cfg = Profile::Desk.config().toy;
    let report = run_toy_experiment(&cfg).unwrap();
    let last = report.last();
    let w = &last.bin_weights;
    let c5 = outcome(
        last.spearman <= -0.9 && w[0] > w[w.len() - 1],
        format!(
            "{} bins, spearman {:.4}, w(noise 0) {:.5} vs w(noise 1) {:.5}",
            w.len(),
            last.spearman,
            w[0],
            w[w.len() - 1]
        ),
    );
    let d = &report.diagnostics;
    let from = cfg.meta.outer_steps * 3 / 4;
    let tail: Vec<f64> = d
        .adjacent_autocorrelation()
        .into_iter()
        .filter(|&(s, _)| s > from)
        .map(|(_, r)| r)
        .collect();
    let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let c7 = outcome(
        d.all_norms_finite() && !tail.is_empty() && min > 0.95,
        format!(
            "{} norms, all finite: {}, min adjacent autocorrelation over last quarter {min:.4} ({} checkpoints)",
            d.records.len(),
            d.all_norms_finite(),
            tail.len()
        ),
    );
    (c5, c7)
}

fn c6_filtering() -> Outcome {
    let cfg = FilterExperimentConfig::default();
    let r = run_filter_experiment(&cfg).unwrap();
    let c = &r.compute;
    let final_step = r.baseline.curve.last().unwrap().step;
    let pass = c.matched_step.is_some_and(|s| s < final_step)
        && c.step_fraction.is_some_and(|f| f < 1.0)
        && c.flops_fraction.is_some_and(f64::is_finite);
    outcome(
        pass,
        format!(
            "selected rho {}, baseline final NLL {:.4}, matched at step {:?} of {final_step}, step_fraction {:?}, flops_fraction {:?}",
            r.selected_rho,
            r.baseline.final_val_nll(),
            c.matched_step,
            c.step_fraction,
            c.flops_fraction
        ),
    )
}

fn c8_regression() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, d) = (150, 6);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|j| rng.random_range(-2.0..2.0) * (1.0 + j as f64) + j as f64)
                .collect()
        })
        .collect();
    let y: Vec<f64> = x
        .iter()
        .map(|r| 1.5 - 2.0 * r[0] + 0.5 * r[2] + 0.1 * r[5] + rng.random_range(-0.3..0.3))
        .collect();
    let ols = ols_fit(&x, &y).unwrap();
    let zero = LassoConfig {
        alpha: 0.0,
        tol: 1e-14,
        folds: 2,
        repeats: 1,
        ..LassoConfig::default()
    };
    let lasso = lasso_fit(&x, &y, &zero).unwrap();
    let rel = lasso
        .coefficients
        .iter()
        .zip(&ols.coefficients)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-300))
        .fold(0.0, f64::max);
    let huge = lasso_fit(
        &x,
        &y,
        &LassoConfig {
            alpha: 1e9,
            ..zero.clone()
        },
    )
    .unwrap();

    // One feature: the standardized solution is soft-thresholded z'y / n.
    let x1: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0]]).collect();
    let m = x1.iter().map(|r| r[0]).sum::<f64>() / n as f64;
    let sd = (x1.iter().map(|r| (r[0] - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    let my = y.iter().sum::<f64>() / n as f64;
    let zy = x1
        .iter()
        .zip(&y)
        .map(|(r, v)| (r[0] - m) / sd * (v - my))
        .sum::<f64>()
        / n as f64;
    let mut st_err: f64 = 0.0;
    for alpha in [0.0, 0.05, zy.abs() / 3.0, zy.abs() * 1.5] {
        let (fit, _) = lasso_path_fit(
            &x1,
            &y,
            &LassoConfig {
                alpha,
                ..LassoConfig::default()
            },
        )
        .unwrap();
        let expect = zy.signum() * (zy.abs() - alpha).max(0.0);
        st_err = st_err.max((fit.coefficients[0] - expect).abs());
    }
    let col: Vec<f64> = x.iter().map(|r| r[3]).collect();
    let self_r = correlate(&x, &col).unwrap()[3].r;
    let pass = rel <= 1e-6 && huge.nonzero() == 0 && st_err <= 1e-10 && self_r == 1.0;
    outcome(
        pass,
        format!(
            "lasso(0) vs ols rel {rel:.1e}; huge alpha nonzero {}; soft-threshold err {st_err:.1e}; self r = {self_r}",
            huge.nonzero()
        ),
    )
}

fn c9_golden() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let text = std::fs::read_to_string(dir.join("golden_texts.jsonl")).unwrap();
    let rows: Vec<(String, _)> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let t = v["text"].as_str().unwrap();
            (
                v["id"].as_str().unwrap().to_string(),
                extract_heuristics(t, PackingInfo::SINGLE),
            )
        })
        .collect();
    let got = heuristics_csv(&rows).unwrap();
    let want = std::fs::read(dir.join("golden_heuristics.csv")).unwrap();
    outcome(
        rows.len() == 20 && got == want,
        format!(
            "{} texts, {} bytes, identical: {}",
            rows.len(),
            got.len(),
            got == want
        ),
    )
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let mut cfg = Profile::Ci.config();
    cfg.seed = 10;
    cfg.resolve().unwrap();
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        cfg.out = tmp.path().join(name);
        dirs.push(cmd_toy(&cfg).unwrap());
    }
    let files = [
        "toy_weights.csv",
        "toy_spearman.csv",
        "diagnostics.csv",
        "autocorrelation.csv",
        "manifest.json",
    ];
    let same = files.iter().all(|f| {
        std::fs::read(dirs[0].join(f)).unwrap() == std::fs::read(dirs[1].join(f)).unwrap()
    });
    outcome(same, format!("compared {}", files.join(", ")))
}

fn main() {
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let on = |c: u32| wanted.is_empty() || wanted.contains(&c);
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        (o, t.elapsed().as_secs_f64())
    };
    let simple: [Criterion; 7] = [
        (
            1,
            "meta-gradient matches finite differences",
            c1_meta_gradient,
        ),
        (
            2,
            "constant scores reduce to unweighted training",
            c2_constant_scores,
        ),
        (
            3,
            "batch top-K keep rate matches the accept probability",
            c3_accept_probability,
        ),
        (4, "stream filter keep rates", c4_stream_filter),
        (
            6,
            "filtering reaches the baseline loss in fewer steps",
            c6_filtering,
        ),
        (8, "regression oracles", c8_regression),
        (9, "heuristic golden file", c9_golden),
    ];
    for (id, name, f) in simple {
        if on(id) {
            let (o, secs) = timed(&f);
            results.push((id, name, o, secs));
        }
    }
    if on(5) || on(7) {
        let t = Instant::now();
        let (c5, c7) = catch_unwind(c5_c7_toy).unwrap_or_else(|_| {
            (
                outcome(false, "toy run panicked".into()),
                outcome(false, "toy run panicked".into()),
            )
        });
        let secs = t.elapsed().as_secs_f64();
        results.push((5, "toy noise bins ordered by rater weight", c5, secs));
        results.push((7, "meta-training stability diagnostics", c7, secs));
    }
    if on(10) {
        let (o, secs) = timed(&c10_determinism);
        results.push((10, "repeated toy runs give identical CSVs", o, secs));
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (id, name, o, secs) in &results {
        println!(
            "criterion {id:>2} {}: {name} [{secs:.1}s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
