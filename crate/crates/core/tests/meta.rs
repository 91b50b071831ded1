mod common;

use common::{central_diff, config, max_rel_error, random_seqs};
use datarater_autodiff::{Tape, Tensor};
use datarater_core::data::{generate_corpus, CorpusSpec, MarkovSpec, SplitSpec};
use datarater_core::experiments::{prepare, PreparedData};
use datarater_core::inner::InnerModelState;
use datarater_core::meta::{
    meta_gradient, meta_step, meta_train, MetaData, MetaTrainConfig, PopulationState, UpdateOrder,
};
use datarater_core::models::{sequence_nll, ModelConfig, RaterParams, TokenBatch};
use datarater_core::optim::{adamw_delta, adamw_step, AdamState, AdamWConfig};

fn tiny_data(seed: u64) -> PreparedData {
    let corpus = generate_corpus(
        &CorpusSpec::Markov(MarkovSpec {
            vocab_size: 12,
            n_docs: 400,
            min_len: 6,
            max_len: 12,
            subsets: vec!["a".into()],
            branching: 2,
            smoothing: 0.05,
        }),
        seed,
    )
    .unwrap();
    let split = SplitSpec {
        inner_train: 0.6,
        outer_heldout: 0.3,
        validation: 0.1,
        seed,
    };
    prepare(&corpus, &split, 12, &[0.0, 0.5, 1.0], seed).unwrap()
}

fn tiny_meta(steps: u64) -> MetaTrainConfig {
    MetaTrainConfig {
        outer_steps: steps,
        unroll: 2,
        n_models: 2,
        inner_batch: 4,
        outer_batch: 4,
        reset_period: 4,
        meta_opt: AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        },
        inner_opt: AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        },
        seed: 3,
        checkpoint_every: 2,
        probe_size: 16,
        ..Default::default()
    }
}

fn cfgs() -> (ModelConfig, ModelConfig) {
    (config(12, 12, 4, 1, 2), config(12, 12, 4, 1, 2))
}

/// Inner state after a few plain steps, so Adam's moments are not zero.
fn warm_state(
    cfg: &ModelConfig,
    seqs: &[datarater_core::data::PackedSequence],
    opt: &AdamWConfig,
) -> InnerModelState {
    let mut st = InnerModelState::fresh(cfg, 9).unwrap();
    for chunk in seqs.chunks(4).take(3) {
        let refs: Vec<_> = chunk.iter().collect();
        let b = TokenBatch::new(&refs, cfg.vocab_size).unwrap();
        let t = Tape::new();
        let p = st.model.params.leaves(&t).unwrap();
        let l = sequence_nll(&t, cfg, &p, &b).unwrap().mean().unwrap();
        let g = t.gradient_values(l, &p).unwrap();
        adamw_step(opt, opt.lr, &mut st.model.params.tensors, &mut st.opt, &g).unwrap();
    }
    st
}

#[test]
fn meta_gradient_matches_finite_differences() {
    let (icfg, rcfg) = (config(10, 8, 4, 1, 2), config(10, 8, 3, 1, 2));
    let opt = AdamWConfig {
        lr: 0.05,
        ..Default::default()
    };
    let seqs = random_seqs(20, 10, 8, 1);
    let st = warm_state(&icfg, &seqs[8..], &opt);
    let rater = RaterParams::init(&rcfg, 2).unwrap();
    let batch = |r: std::ops::Range<usize>| {
        let refs: Vec<_> = seqs[r].iter().collect();
        TokenBatch::new(&refs, 10).unwrap()
    };
    let inner = vec![batch(0..4), batch(4..8)];
    let outer = batch(12..20);
    let mg = meta_gradient(&st, &rater, &inner, &outer, &opt).unwrap();
    let analytic: Vec<f64> = mg.grads.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = central_diff(
        |x| {
            let r = RaterParams::from_params(&rcfg, rater.params.with_flat(x).unwrap()).unwrap();
            meta_gradient(&st, &r, &inner, &outer, &opt)
                .unwrap()
                .outer_nll
        },
        &rater.params.flatten(),
        1e-5,
    );
    let err = max_rel_error(&analytic, &numeric);
    assert!(err <= 1e-4, "max relative error {err}");
    assert!(analytic.iter().any(|g| g.abs() > 1e-8));
}

#[test]
fn no_inner_steps_means_zero_meta_gradient() {
    let (icfg, rcfg) = cfgs();
    let st = InnerModelState::fresh(&icfg, 0).unwrap();
    let rater = RaterParams::init(&rcfg, 1).unwrap();
    let seqs = random_seqs(4, 12, 12, 2);
    let refs: Vec<_> = seqs.iter().collect();
    let outer = TokenBatch::new(&refs, 12).unwrap();
    let mg = meta_gradient(&st, &rater, &[], &outer, &AdamWConfig::default()).unwrap();
    assert!(mg.grads.iter().all(|g| g.data().iter().all(|&x| x == 0.0)));
    assert_eq!(mg.next_state, st);
}

#[test]
fn zero_head_routes_the_gradient_through_the_head_only() {
    let (icfg, rcfg) = cfgs();
    let seqs = random_seqs(12, 12, 12, 4);
    let opt = AdamWConfig {
        lr: 0.05,
        ..Default::default()
    };
    let st = warm_state(&icfg, &seqs, &opt);
    let mut rater = RaterParams::init(&rcfg, 5).unwrap();
    rater.zero_head();
    let b = |r: std::ops::Range<usize>| {
        let refs: Vec<_> = seqs[r].iter().collect();
        TokenBatch::new(&refs, 12).unwrap()
    };
    let mg = meta_gradient(&st, &rater, &[b(0..4), b(4..8)], &b(8..12), &opt).unwrap();
    for (name, g) in rater.params.names.iter().zip(&mg.grads) {
        let nonzero = g.data().iter().any(|&x| x != 0.0);
        assert_eq!(nonzero, name == "head.w", "{name}");
    }
}

#[test]
fn initial_ages_are_staggered() {
    let (icfg, rcfg) = cfgs();
    let cfg = MetaTrainConfig {
        n_models: 4,
        reset_period: 100,
        ..tiny_meta(1)
    };
    let pop = PopulationState::new(&icfg, RaterParams::init(&rcfg, 0).unwrap(), &cfg).unwrap();
    assert_eq!(pop.ages(), vec![0, 25, 50, 75]);
}

#[test]
fn resets_reinitialize_models_but_keep_meta_state() {
    let data = tiny_data(1);
    let (icfg, rcfg) = cfgs();
    let cfg = tiny_meta(4);
    let md = MetaData {
        inner: &data.inner,
        outer: &data.outer,
    };
    let mut pop = PopulationState::new(&icfg, RaterParams::init(&rcfg, 0).unwrap(), &cfg).unwrap();
    assert_eq!(pop.ages(), vec![0, 2]);
    meta_step(&mut pop, &md, &cfg).unwrap();
    let r = meta_step(&mut pop, &md, &cfg).unwrap();
    // Member 1 started at age 2 and reaches R = 4 after two steps.
    assert_eq!(r.reset, vec![1]);
    assert_eq!(pop.ages(), vec![2, 0]);
    let m = &pop.members[1];
    assert_eq!(m.resets, 1);
    assert_eq!(m.state.opt.t, 0);
    assert_eq!(m.meta_opt.t, 2);
    let nll = m.state.model.nll_all(&data.validation[..8], 8).unwrap();
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    assert!((mean - 12f64.ln()).abs() < 0.3, "{mean}");
}

#[test]
fn single_member_update_is_plain_adam_on_the_meta_gradient() {
    let data = tiny_data(2);
    let (icfg, rcfg) = cfgs();
    let cfg = MetaTrainConfig {
        n_models: 1,
        ..tiny_meta(1)
    };
    // One sequence per split, so every draw is known in advance.
    let (inner, outer) = (vec![data.inner[0].clone()], vec![data.outer[0].clone()]);
    let md = MetaData {
        inner: &inner,
        outer: &outer,
    };
    let rater = RaterParams::init(&rcfg, 7).unwrap();
    let mut pop = PopulationState::new(&icfg, rater.clone(), &cfg).unwrap();
    let member = pop.members[0].state.clone();
    let report = meta_step(&mut pop, &md, &cfg).unwrap();

    let ib = TokenBatch::gather(&inner, &[0; 4], 12).unwrap();
    let ob = TokenBatch::gather(&outer, &[0; 4], 12).unwrap();
    let mg = meta_gradient(&member, &rater, &[ib.clone(), ib], &ob, &cfg.inner_opt).unwrap();
    let mut st = AdamState::new(&rater.params.tensors);
    let delta = adamw_delta(
        &cfg.meta_opt,
        cfg.meta_opt.lr_at(0),
        &rater.params.tensors,
        &mut st,
        &mg.grads,
    )
    .unwrap();
    let expected: Vec<Tensor> = rater
        .params
        .tensors
        .iter()
        .zip(&delta)
        .map(|(p, d)| p.zip_map(d, |p, d| p + d).unwrap())
        .collect();
    assert_eq!(pop.rater.params.tensors, expected);
    assert_eq!(pop.members[0].meta_opt, st);
    let norm = delta.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    assert_eq!(report.records[0].meta_update_norm, norm);
    assert_eq!(report.records[0].outer_nll, mg.outer_nll);
}

#[test]
fn opposite_gradients_cancel() {
    let cfg = AdamWConfig::default();
    let p = vec![Tensor::vector(vec![0.5, -0.5, 2.0])];
    let g = vec![Tensor::vector(vec![0.3, -0.01, 5.0])];
    let ng = vec![g[0].map(|x| -x)];
    let a = adamw_delta(&cfg, 1e-3, &p, &mut AdamState::new(&p), &g).unwrap();
    let b = adamw_delta(&cfg, 1e-3, &p, &mut AdamState::new(&p), &ng).unwrap();
    let sum = a[0].zip_map(&b[0], |x, y| x + y).unwrap();
    assert!(sum.data().iter().all(|&x| x == 0.0));
}

#[test]
fn adam_step_size_is_bounded() {
    use rand::{Rng, SeedableRng};
    let cfg = AdamWConfig::default();
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let gamma = b1 * b1 / b2;
    let lr = 1e-2;
    let p = vec![Tensor::zeros(&[50])];
    let mut st = AdamState::new(&p);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for t in 1..=200 {
        let scale = 10f64.powf(rng.random_range(-4.0..4.0));
        let g = vec![Tensor::vector(
            (0..50)
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect(),
        )];
        let d = adamw_delta(&cfg, lr, &p, &mut st, &g).unwrap();
        let bound = lr * (1.0 - b1) / ((1.0 - b2) * (1.0 - gamma)).sqrt()
            * (1.0 - b2.powi(t)).sqrt()
            / (1.0 - b1.powi(t));
        assert!(d[0].data().iter().all(|x| x.abs() <= bound * (1.0 + 1e-12)));
    }
}

#[test]
fn zero_steps_leave_the_rater_unchanged() {
    let data = tiny_data(3);
    let (icfg, rcfg) = cfgs();
    let rater = RaterParams::init(&rcfg, 1).unwrap();
    let md = MetaData {
        inner: &data.inner,
        outer: &data.outer,
    };
    let (out, diag) = meta_train(&tiny_meta(0), md, &icfg, rater.clone()).unwrap();
    assert!(out.params.bit_equal(&rater.params));
    assert!(diag.records.is_empty());
}

#[test]
fn meta_training_is_deterministic_and_worker_independent() {
    let data = tiny_data(4);
    let (icfg, rcfg) = cfgs();
    let md = MetaData {
        inner: &data.inner,
        outer: &data.outer,
    };
    let rater = RaterParams::init(&rcfg, 2).unwrap();
    let (a, da) = meta_train(&tiny_meta(6), md, &icfg, rater.clone()).unwrap();
    let (b, db) = meta_train(&tiny_meta(6), md, &icfg, rater.clone()).unwrap();
    let cfg2 = MetaTrainConfig {
        workers: 2,
        ..tiny_meta(6)
    };
    let (c, dc) = meta_train(&cfg2, md, &icfg, rater.clone()).unwrap();
    assert!(a.params.bit_equal(&b.params) && a.params.bit_equal(&c.params));
    assert_eq!(da, db);
    assert_eq!(da.records, dc.records);
    assert!(!a.params.bit_equal(&rater.params));
    assert!(da.all_norms_finite());
    assert_eq!(da.checkpoint_steps, vec![2, 4, 6]);
    assert_eq!(da.resets.len(), 3);
}

#[test]
fn clean_splits_never_leak_into_inner_batches() {
    let data = tiny_data(5);
    let (icfg, rcfg) = cfgs();
    let md = MetaData {
        inner: &data.inner,
        outer: &data.outer,
    };
    let (_, d) = meta_train(
        &tiny_meta(3),
        md,
        &icfg,
        RaterParams::init(&rcfg, 0).unwrap(),
    )
    .unwrap();
    assert!(!d.inner_doc_ids.is_empty());
    assert!(d.leaked_doc_ids().is_empty());

    // Using the inner split as the outer split is caught.
    let md = MetaData {
        inner: &data.inner,
        outer: &data.inner,
    };
    let (_, d) = meta_train(
        &tiny_meta(3),
        md,
        &icfg,
        RaterParams::init(&rcfg, 0).unwrap(),
    )
    .unwrap();
    assert!(!d.leaked_doc_ids().is_empty());
}

#[test]
fn update_orders_differ() {
    let data = tiny_data(6);
    let (icfg, rcfg) = cfgs();
    let md = MetaData {
        inner: &data.inner,
        outer: &data.outer,
    };
    let rater = RaterParams::init(&rcfg, 3).unwrap();
    let (a, _) = meta_train(&tiny_meta(3), md, &icfg, rater.clone()).unwrap();
    let cfg = MetaTrainConfig {
        update_order: UpdateOrder::AdamOfMean,
        ..tiny_meta(3)
    };
    let (b, _) = meta_train(&cfg, md, &icfg, rater).unwrap();
    assert!(a.params.max_abs_diff(&b.params) > 0.0);
}

#[test]
fn non_finite_member_is_excluded_and_reset() {
    let data = tiny_data(7);
    let (icfg, rcfg) = cfgs();
    let cfg = tiny_meta(1);
    let md = MetaData {
        inner: &data.inner,
        outer: &data.outer,
    };
    let rater = RaterParams::init(&rcfg, 0).unwrap();
    let mut pop = PopulationState::new(&icfg, rater.clone(), &cfg).unwrap();
    pop.members[0].state.model.params.tensors[0]
        .data_mut()
        .fill(1e300);
    let report = meta_step(&mut pop, &md, &cfg).unwrap();
    assert!(report.records[0].excluded);
    assert!(report.records[0].meta_update_norm.is_nan());
    assert!(!report.records[1].excluded);
    assert!(report.reset.contains(&0));
    assert!(pop.rater.params.is_finite());
    assert!(!pop.rater.params.bit_equal(&rater.params));
}

#[test]
fn invalid_unroll_is_rejected() {
    let cfg = MetaTrainConfig {
        unroll: 3,
        ..tiny_meta(1)
    };
    assert!(cfg.validate().is_err());
}
