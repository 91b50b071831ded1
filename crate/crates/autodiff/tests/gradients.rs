use std::sync::Arc;

use datarater_autodiff::{check_grad, clip_by_global_norm, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn assert_check<F>(f: F, x: &Tensor)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let check = check_grad(f, x, 1e-5).unwrap();
    assert!(
        check.max_rel_error <= 1e-6,
        "max rel error {} (analytic {:?}, numeric {:?})",
        check.max_rel_error,
        check.analytic.data(),
        check.numeric.data()
    );
}

#[test]
fn matmul_identity_returns_input() {
    let tape = Tape::new();
    let eye = tape
        .leaf(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap())
        .unwrap();
    let x = tape.leaf(random(&[2, 3], 1)).unwrap();
    let y = eye.matmul(x).unwrap();
    assert_eq!(y.value(), x.value());
}

#[test]
fn softmax_of_constant_is_uniform() {
    for c in [-4.0, 0.0, 2.5, 30.0] {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], c)).unwrap();
        let s = x.softmax().unwrap().value();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

#[test]
fn log_exp_round_trip() {
    let tape = Tape::new();
    let x = tape.scalar(0.7).unwrap();
    let y = x.exp().unwrap().log().unwrap();
    assert!((y.item() - 0.7).abs() < 1e-12);
}

#[test]
fn sum_gradient_is_exact() {
    // Dyadic inputs and a power-of-two step keep the differences exact.
    let x = Tensor::matrix(2, 3, vec![0.5, -1.25, 3.0, 0.125, -2.0, 1.75]).unwrap();
    let check = check_grad(|_, x| x.sum(), &x, 2f64.powi(-17)).unwrap();
    assert!(check.analytic.data().iter().all(|&g| g == 1.0));
    assert_eq!(check.max_rel_error, 0.0);
}

#[test]
fn disconnected_coordinate_has_exact_zero_gradient() {
    let x = random(&[3], 3);
    let ids: Arc<[usize]> = vec![0, 2].into();
    let check = check_grad(
        move |_, x| x.reshape(&[3, 1])?.gather_rows(ids.clone())?.exp()?.sum(),
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(check.analytic.data()[1], 0.0);
    assert_eq!(check.numeric.data()[1], 0.0);
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let x = random(&[2, 3], 4).map(|v| v + 2.0);
    assert_check(|_, x| x.exp()?.sum(), &x);
    assert_check(|_, x| x.log()?.sum(), &x);
    assert_check(|_, x| x.tanh()?.square()?.sum(), &x);
    assert_check(|_, x| x.sqrt()?.sum(), &x);
    assert_check(|_, x| x.div(x.exp()?)?.sum(), &x);
    assert_check(
        |_, x| x.scale(-1.5)?.add_scalar(0.3)?.neg()?.square()?.sum(),
        &x,
    );
    assert_check(|_, x| x.mul(x.tanh()?)?.sub(x)?.mean(), &x);
}

#[test]
fn reductions_and_broadcasts_match_finite_differences() {
    let x = random(&[3, 4], 5);
    assert_check(|_, x| x.sum_rows()?.square()?.sum(), &x);
    assert_check(|_, x| x.sum_cols()?.exp()?.sum(), &x);
    assert_check(|_, x| x.sum_rows()?.broadcast_rows(2)?.tanh()?.sum(), &x);
    assert_check(|_, x| x.sum_cols()?.broadcast_cols(5)?.square()?.sum(), &x);
    assert_check(|_, x| x.sum()?.broadcast_scalar(&[2, 2])?.exp()?.sum(), &x);
    assert_check(
        |_, x| {
            x.reshape(&[12])?
                .reshape(&[4, 3])?
                .sum_rows()?
                .square()?
                .sum()
        },
        &x,
    );
}

#[test]
fn softmax_family_matches_finite_differences() {
    let x = random(&[3, 5], 6);
    let w = random(&[3, 5], 7);
    let w1 = w.clone();
    assert_check(move |t, x| x.softmax()?.mul(t.leaf(w1.clone())?)?.sum(), &x);
    let w2 = w.clone();
    assert_check(
        move |t, x| x.log_softmax()?.mul(t.leaf(w2.clone())?)?.sum(),
        &x,
    );
    let v = random(&[5], 8);
    assert_check(
        move |t, x| x.softmax()?.mul(t.leaf(v.clone())?)?.sum(),
        &random(&[5], 9),
    );
}

#[test]
fn matmul_variants_match_finite_differences() {
    let b = random(&[4, 3], 10);
    for (ta, tb, a_shape) in [(false, false, [2, 4]), (true, false, [4, 2])] {
        let b = b.clone();
        assert_check(
            move |t, a| a.matmul_ex(t.leaf(b.clone())?, ta, tb, 1)?.tanh()?.sum(),
            &random(&a_shape, 11),
        );
    }
    let bt = random(&[3, 4], 12);
    assert_check(
        move |t, a| {
            a.matmul_ex(t.leaf(bt.clone())?, false, true, 1)?
                .square()?
                .sum()
        },
        &random(&[2, 4], 13),
    );
    let a = random(&[2, 4], 14);
    assert_check(
        move |t, b| {
            t.leaf(a.clone())?
                .matmul_ex(b, false, true, 1)?
                .exp()?
                .sum()
        },
        &random(&[3, 4], 15),
    );
    // batched: two blocks of [3, 2] x [3, 2]^T
    let k = random(&[6, 2], 16);
    assert_check(
        move |t, q| {
            q.matmul_ex(t.leaf(k.clone())?, false, true, 2)?
                .softmax()?
                .square()?
                .sum()
        },
        &random(&[6, 2], 17),
    );
    let a2 = random(&[6, 2], 18);
    assert_check(
        move |t, b| {
            t.leaf(a2.clone())?
                .matmul_ex(b, true, true, 2)?
                .tanh()?
                .sum()
        },
        &random(&[4, 3], 19),
    );
}

#[test]
fn indexing_ops_match_finite_differences() {
    let ids: Arc<[usize]> = vec![2, 0, 2, 1].into();
    assert_check(
        move |_, x| x.gather_rows(ids.clone())?.tanh()?.sum(),
        &random(&[3, 2], 20),
    );
    let idx: Arc<[usize]> = vec![1, 0, 3].into();
    assert_check(
        move |_, x| x.log_softmax()?.select_cols(idx.clone())?.sum(),
        &random(&[3, 4], 21),
    );
    let idx2: Arc<[usize]> = vec![1, 0, 3].into();
    assert_check(
        move |_, x| x.place_cols(idx2.clone(), 4)?.softmax()?.square()?.sum(),
        &random(&[3], 22),
    );
    let ids2: Arc<[usize]> = vec![1, 1, 0].into();
    assert_check(
        move |_, x| x.scatter_rows(ids2.clone(), 2)?.exp()?.sum(),
        &random(&[3, 2], 23),
    );
}

#[test]
fn sequence_ops_match_finite_differences() {
    assert_check(
        |_, x| x.causal_mean(3)?.tanh()?.square()?.sum(),
        &random(&[6, 2], 24),
    );
    let w: Arc<[f64]> = vec![0.5, 0.25, 0.0, 1.0, 0.2, 0.3].into();
    let w1 = w.clone();
    assert_check(
        move |_, x| x.segment_sum(3, w1.clone())?.exp()?.sum(),
        &random(&[6, 2], 25),
    );
    assert_check(
        move |_, x| x.segment_expand(3, w.clone())?.tanh()?.sum(),
        &random(&[2, 2], 26),
    );
}

#[test]
fn clipping_matches_finite_differences_in_both_branches() {
    for bound in [10.0, 0.5] {
        assert_check(
            move |t, x| {
                let c = clip_by_global_norm(t, &[x], bound)?;
                c[0].tanh()?.sum()
            },
            &random(&[4], 27),
        );
    }
}

#[test]
fn weighted_loss_gradient_wrt_scores() {
    // d(softmax-weighted loss)/d(scores) on a 3-element batch.
    let losses = Tensor::vector(vec![2.3, 0.7, 1.1]);
    let scores = Tensor::vector(vec![0.2, -0.4, 1.3]);
    assert_check(
        move |t, s| s.softmax()?.mul(t.leaf(losses.clone())?)?.sum(),
        &scores,
    );
}

#[test]
fn second_order_matches_finite_differences_of_gradient() {
    // f(x) = sum(tanh(W x)^2) ; check d/dx <grad f(x), v>
    let w = random(&[3, 4], 30);
    let v = random(&[4, 1], 31);
    let check = check_grad(
        move |t, x| {
            let y = t.leaf(w.clone())?.matmul(x)?.tanh()?.square()?.sum()?;
            let g = t.gradients(y, &[x])?[0];
            g.mul(t.leaf(v.clone())?)?.sum()
        },
        &random(&[4, 1], 32),
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_error <= 1e-4, "{}", check.max_rel_error);
}

#[test]
fn replay_is_bit_identical() {
    let tape = Tape::new();
    let x = tape.leaf(random(&[4, 3], 40)).unwrap();
    let w = tape.leaf(random(&[3, 5], 41)).unwrap();
    let y = x.matmul(w).unwrap().log_softmax().unwrap().sum().unwrap();
    let _ = tape.gradients(y, &[x, w]).unwrap();
    assert_eq!(tape.replay_mismatches().unwrap(), 0);

    let eval = || {
        let tape = Tape::new();
        let x = tape.leaf(random(&[4, 3], 40)).unwrap();
        let w = tape.leaf(random(&[3, 5], 41)).unwrap();
        let y = x.matmul(w).unwrap().log_softmax().unwrap().sum().unwrap();
        let g = tape.gradient_values(y, &[w]).unwrap().remove(0);
        (
            y.item().to_bits(),
            g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(eval(), eval());
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(
        scores in proptest::collection::vec(-5.0f64..5.0, 1..16),
        c in -30.0f64..30.0,
    ) {
        let tape = Tape::new();
        let s = tape.leaf(Tensor::vector(scores.clone())).unwrap();
        let shifted = s.add_scalar(c).unwrap();
        let a = s.softmax().unwrap().value();
        let b = shifted.softmax().unwrap().value();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        let total: f64 = a.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gradient_is_linear(
        xs in proptest::collection::vec(-1.0f64..1.0, 4),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        fn f(x: Var<'_>) -> Var<'_> {
            x.tanh().unwrap().square().unwrap().sum().unwrap()
        }
        fn g(x: Var<'_>) -> Var<'_> {
            x.exp().unwrap().mul(x).unwrap().sum().unwrap()
        }
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(xs)).unwrap();
        let combo = f(x).scale(a).unwrap().add(g(x).scale(b).unwrap()).unwrap();
        let lhs = tape.gradient_values(combo, &[x]).unwrap().remove(0);
        let gf = tape.gradient_values(f(x), &[x]).unwrap().remove(0);
        let gg = tape.gradient_values(g(x), &[x]).unwrap().remove(0);
        for i in 0..4 {
            let rhs = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
