use datarater_core::analysis::baselines::{pplx_filter, PplxVariant};
use datarater_core::analysis::distributions::score_distributions;
use datarater_core::analysis::flops::{compute_to_match, FlopsModel};
use datarater_core::analysis::heuristics::{extract_heuristics, PackingInfo, FEATURE_NAMES};
use datarater_core::analysis::regression::{
    correlate, lasso_fit, lasso_path_fit, ols_fit, LassoConfig,
};
use datarater_core::curation::{DiscardPolicy, ScoreLogRow};
use datarater_core::train::CurvePoint;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn design(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta: Vec<f64> = (0..d)
        .map(|j| if j % 2 == 0 { 1.0 + j as f64 } else { 0.0 })
        .collect();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64 + j as f64)
                .collect()
        })
        .collect();
    let y = x
        .iter()
        .map(|r| {
            3.0 + r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()
                + 0.1 * rng.random_range(-1.0..1.0)
        })
        .collect();
    (x, y)
}

#[test]
fn pplx_variants_on_a_ranked_batch() {
    // B = 8, K = 4 at rho = 0.5; scores equal to their rank.
    let policy = DiscardPolicy::new(0.5, 4).unwrap();
    let scores = [5.0, 0.0, 7.0, 3.0, 1.0, 6.0, 2.0, 4.0];
    let ranks_of = |kept: Vec<usize>| {
        let mut r: Vec<f64> = kept.iter().map(|&i| scores[i]).collect();
        r.sort_by(f64::total_cmp);
        r
    };
    assert_eq!(
        ranks_of(pplx_filter(PplxVariant::Bot, &scores, &policy).unwrap()),
        vec![0.0, 1.0, 2.0, 3.0]
    );
    assert_eq!(
        ranks_of(pplx_filter(PplxVariant::Top, &scores, &policy).unwrap()),
        vec![4.0, 5.0, 6.0, 7.0]
    );
    assert_eq!(
        ranks_of(pplx_filter(PplxVariant::Mid, &scores, &policy).unwrap()),
        vec![2.0, 3.0, 4.0, 5.0]
    );
    let kept = pplx_filter(PplxVariant::Mid, &scores, &policy).unwrap();
    assert!(kept.windows(2).all(|w| w[0] < w[1]));
    assert_eq!("MID".parse::<PplxVariant>().unwrap(), PplxVariant::Mid);
    assert!("median".parse::<PplxVariant>().is_err());
}

#[test]
fn pearson_self_correlation_is_one() {
    let (x, _) = design(50, 3, 1);
    let col: Vec<f64> = x.iter().map(|r| r[1]).collect();
    let c = correlate(&x, &col).unwrap();
    assert_eq!(c[1].r, 1.0);
    let neg: Vec<f64> = col.iter().map(|v| -2.0 * v + 1.0).collect();
    assert!((correlate(&x, &neg).unwrap()[1].r + 1.0).abs() < 1e-15);
    let mut xc = x.clone();
    for r in &mut xc {
        r[0] = 4.0;
    }
    let c = correlate(&xc, &col).unwrap();
    assert!(c[0].constant && c[0].r == 0.0);
}

#[test]
fn ols_matches_an_independent_solver() {
    let (x, y) = design(80, 4, 2);
    let fit = ols_fit(&x, &y).unwrap();
    // Raw-scale least squares with an intercept column via SVD.
    let a = DMatrix::from_fn(80, 5, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let b = DVector::from_vec(y.clone());
    let sol = a.svd(true, true).solve(&b, 1e-14).unwrap();
    let raw = fit.raw_coefficients();
    for j in 0..4 {
        assert!(
            (raw[j] - sol[j + 1]).abs() <= 1e-6 * sol[j + 1].abs().max(1.0),
            "{j}"
        );
    }
    assert!((fit.raw_intercept() - sol[0]).abs() < 1e-6);
    assert!(fit.r2 > 0.99);
}

#[test]
fn lasso_without_penalty_is_least_squares() {
    let (x, y) = design(120, 5, 3);
    let ols = ols_fit(&x, &y).unwrap();
    let cfg = LassoConfig {
        alpha: 0.0,
        tol: 1e-13,
        folds: 5,
        repeats: 1,
        ..Default::default()
    };
    let lasso = lasso_fit(&x, &y, &cfg).unwrap();
    for (a, b) in lasso.coefficients.iter().zip(&ols.coefficients) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12), "{a} vs {b}");
    }
    assert_eq!(lasso.cv_scores.len(), 5);
    assert!(lasso.cv_scores.iter().all(|r| *r > 0.9));
}

#[test]
fn huge_penalty_zeroes_everything() {
    let (x, y) = design(60, 5, 4);
    let fit = lasso_fit(
        &x,
        &y,
        &LassoConfig {
            alpha: 1e6,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(fit.nonzero(), 0);
    let m = y.iter().sum::<f64>() / y.len() as f64;
    assert_eq!(fit.intercept, m);
}

#[test]
fn single_feature_is_a_soft_threshold() {
    let (x, y) = design(40, 1, 5);
    let n = x.len() as f64;
    let mx = x.iter().map(|r| r[0]).sum::<f64>() / n;
    let sd = (x.iter().map(|r| (r[0] - mx).powi(2)).sum::<f64>() / n).sqrt();
    let my = y.iter().sum::<f64>() / n;
    let zy: f64 = x
        .iter()
        .zip(&y)
        .map(|(r, v)| (r[0] - mx) / sd * (v - my))
        .sum::<f64>()
        / n;
    for alpha in [0.0, 0.1, zy.abs() * 0.5, zy.abs() * 2.0] {
        let expected = zy.signum() * (zy.abs() - alpha).max(0.0);
        let (fit, _) = lasso_path_fit(
            &x,
            &y,
            &LassoConfig {
                alpha,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            (fit.coefficients[0] - expected).abs() < 1e-10,
            "alpha {alpha}"
        );
    }
}

#[test]
fn lasso_objective_never_increases() {
    let (x, y) = design(100, 6, 6);
    let (fit, history) = lasso_path_fit(
        &x,
        &y,
        &LassoConfig {
            alpha: 0.2,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert!(fit.nonzero() < 6);
}

#[test]
fn heuristic_examples() {
    let h = extract_heuristics("Hello World 42!", PackingInfo::SINGLE);
    assert_eq!(h.get("word_count"), Some(3.0));
    assert_eq!(h.get("text_length_cutoff"), Some(15.0));
    assert_eq!(h.get("uppercase_letters_fraction"), Some(2.0 / 15.0));
    assert_eq!(h.get("numeric_fraction"), Some(2.0 / 15.0));
    assert_eq!(h.get("punctuation_fraction"), Some(1.0 / 15.0));
    assert_eq!(h.get("average_word_length"), Some(13.0 / 3.0));

    let rep = "a b c d e a b c d e";
    let h = extract_heuristics(rep, PackingInfo::SINGLE);
    // Six 5-grams, five of them distinct.
    assert_eq!(h.get("5gram_repetition_fraction"), Some(1.0 / 6.0));

    let good =
        "The cat sat on the mat.\nIt was a sunny day today.\nBirds sang in the tall trees.\n\
                We walked along the river bank.\nEveryone went home before dark.";
    let h = extract_heuristics(good, PackingInfo::SINGLE);
    assert_eq!(h.get("passes_all_c4_filters"), Some(1.0));
    let h = extract_heuristics(
        &format!("{good}\nRead our privacy policy."),
        PackingInfo::SINGLE,
    );
    assert_eq!(h.get("c4_contains_policy_keyword"), Some(1.0));
    assert_eq!(h.get("passes_all_c4_filters"), Some(1.0));
    let h = extract_heuristics(&format!("{good} {{}}"), PackingInfo::SINGLE);
    assert_eq!(h.get("passes_all_c4_filters"), Some(0.0));
    assert_eq!(FEATURE_NAMES.len(), 23);
}

fn row(subset: &str, score: f64) -> ScoreLogRow {
    ScoreLogRow {
        sequence_id: 0,
        subset: subset.into(),
        raw_score: score,
        quantile: 0.0,
        accept_prob: 1.0,
        kept: true,
    }
}

#[test]
fn mixture_follows_the_global_cut() {
    let rows: Vec<ScoreLogRow> = (0..6)
        .map(|i| row("a", i as f64))
        .chain((6..10).map(|i| row("b", i as f64)))
        .collect();
    let subsets = vec!["a".to_string(), "b".to_string()];
    let d = score_distributions(&rows, &subsets, &[0.0, 0.5, 0.8], 5).unwrap();
    let w = |rho: f64, s: &str| {
        d.mixture
            .iter()
            .find(|m| m.rho == rho && m.subset == s)
            .unwrap()
            .weight
    };
    assert_eq!(w(0.0, "a"), 0.6);
    assert_eq!(w(0.5, "a"), 0.2);
    assert_eq!(w(0.5, "b"), 0.8);
    assert_eq!(w(0.8, "b"), 1.0);
    assert_eq!(d.histograms[0].1, vec![2, 2, 2, 0, 0]);
    assert_eq!(d.histograms[1].1, vec![0, 0, 0, 2, 2]);
    assert_eq!(d.edges.len(), 6);
    assert!(score_distributions(&[row("c", 0.0)], &subsets, &[0.5], 2).is_err());
}

fn curve(points: &[(u64, f64)]) -> Vec<CurvePoint> {
    points
        .iter()
        .map(|&(step, val_nll)| CurvePoint { step, val_nll })
        .collect()
}

#[test]
fn compute_to_match_examples() {
    let base = curve(&[(0, 3.0), (50, 2.5), (100, 2.0)]);
    let filt = curve(&[(0, 3.0), (25, 2.4), (50, 1.9), (100, 1.5)]);
    let flops = FlopsModel {
        model_params: 1000,
        rater_params: 300,
        tokens_per_step: 64,
        rho: 0.5,
    };
    let c = compute_to_match(&base, &filt, &flops).unwrap();
    assert_eq!(c.matched_step, Some(50));
    assert_eq!(c.step_fraction, Some(0.5));
    // Rater overhead: 2·300·2 / (6·1000) = 0.2 of a training step.
    assert!((c.flops_fraction.unwrap() - 0.6).abs() < 1e-15);
    assert!((c.net_gain.unwrap() - 0.4).abs() < 1e-15);

    let never = curve(&[(0, 3.0), (100, 2.1)]);
    let c = compute_to_match(&base, &never, &flops).unwrap();
    assert_eq!(c.step_fraction, None);
    assert_eq!(c.flops_fraction, None);

    let unsorted = curve(&[(50, 2.0), (0, 3.0)]);
    assert!(compute_to_match(&unsorted, &filt, &flops).is_err());
}
