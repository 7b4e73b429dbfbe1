mod common;

use bgcl::numcore::rng::stream;
use bgcl::numcore::Tensor;
use bgcl::objective::contrastive_loss;
use bgcl::oracles::naive_grace_loss;
use common::random_tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vectorized_loss_matches_direct_summation(
        seed in any::<u64>(),
        n in 1usize..24,
        d in 1usize..6,
        tau in 0.1f64..2.0,
    ) {
        let mut rng = stream(seed, 0);
        let a = random_tensor(&mut rng, n, d, -2.0, 2.0);
        let b = random_tensor(&mut rng, n, d, -2.0, 2.0);
        let fast = contrastive_loss(&a, &b, tau).unwrap();
        let slow = naive_grace_loss(&a, &b, tau);
        prop_assert!((fast - slow).abs() < 1e-10);
        let fast_half = contrastive_loss(&a, &b, tau / 2.0).unwrap();
        let slow_half = naive_grace_loss(&a, &b, tau / 2.0);
        prop_assert!(((fast_half - fast) - (slow_half - slow)).abs() < 1e-10);
    }

    #[test]
    fn loss_is_scale_invariant_per_row(seed in any::<u64>(), k in 0.1f64..10.0) {
        let mut rng = stream(seed, 0);
        let a = random_tensor(&mut rng, 6, 3, -1.0, 1.0);
        let b = random_tensor(&mut rng, 6, 3, -1.0, 1.0);
        let l = contrastive_loss(&a, &b, 0.5).unwrap();
        let ls = contrastive_loss(&a.scale(k), &b, 0.5).unwrap();
        prop_assert!((l - ls).abs() < 1e-10);
    }
}

#[test]
fn orthonormal_pair_value() {
    let e = Tensor::identity(2);
    let expected = (std::f64::consts::E + 2.0).ln() - 1.0;
    assert!((contrastive_loss(&e, &e, 1.0).unwrap() - expected).abs() < 1e-12);
    assert!((naive_grace_loss(&e, &e, 1.0) - 0.55144).abs() < 1e-4);
}

#[test]
fn equal_similarities_give_ln_three() {
    let x = Tensor::matrix(2, 2, vec![0.3, 0.4, 0.3, 0.4]);
    assert!((contrastive_loss(&x, &x, 1.0).unwrap() - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_rows_do_not_produce_nan() {
    let z = Tensor::zeros(&[3, 2]);
    assert!(contrastive_loss(&z, &z, 0.5).unwrap().is_finite());
}
