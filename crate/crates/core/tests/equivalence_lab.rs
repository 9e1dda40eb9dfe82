use dsnet::equivalence::{
    expand_dense_identity_coefficients, fuzz_concat_sum, fuzz_shared_weight, gradient_check, linear_closed_form_coefficients,
    verify_concat_sum_equivalence, verify_shared_weight_equivalence, EQUIVALENCE_TOL,
};
use dsnet::gradcheck::{central_difference, finite_diff_gradient};
use dsnet::{Error, Network, NetworkConfig, Tensor, Variant};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rt(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(dims, -1.0, 1.0, rng).unwrap()
}

#[test]
fn concat_sum_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let single = rt([2, 3, 5, 5], &mut rng);
    let h = rt([4, 3, 3, 3], &mut rng);
    assert_eq!(verify_concat_sum_equivalence(&[single], &h, 1, 1).unwrap().max_abs_diff, 0.0);

    let sources: Vec<_> = (0..3).map(|_| rt([2, 2, 6, 6], &mut rng)).collect();
    let h6 = rt([5, 6, 3, 3], &mut rng);
    let r = verify_concat_sum_equivalence(&sources, &h6, 1, 1).unwrap();
    assert!(r.passed && r.max_abs_diff <= EQUIVALENCE_TOL);

    // an all-zero source contributes nothing: compare against the two live sources
    let zero = Tensor::zeros([2, 2, 6, 6]).unwrap();
    let with_zero = [sources[0].clone(), zero, sources[2].clone()];
    let full = dsnet::kernels::conv2d(&Tensor::concat_channels(&with_zero.iter().collect::<Vec<_>>()).unwrap(), &h6, 1, 1).unwrap();
    let mut h4 = Vec::new();
    for o in 0..5 {
        for c in [0, 1, 4, 5] {
            let base = (o * 6 + c) * 9;
            h4.extend_from_slice(&h6.data()[base..base + 9]);
        }
    }
    let h4 = Tensor::from_vec([5, 4, 3, 3], h4).unwrap();
    let two = Tensor::concat_channels(&[&sources[0], &sources[2]]).unwrap();
    let reduced = dsnet::kernels::conv2d(&two, &h4, 1, 1).unwrap();
    assert!(full.max_abs_diff(&reduced).unwrap() <= 1e-12);

    let bad = rt([4, 5, 3, 3], &mut rng);
    assert!(matches!(
        verify_concat_sum_equivalence(&sources, &bad, 1, 1),
        Err(Error::ChannelMismatch { .. })
    ));
}

#[test]
fn shared_weight_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rt([1, 3, 5, 5], &mut rng);
    let h = rt([2, 3, 3, 3], &mut rng);
    assert!(verify_shared_weight_equivalence(&[x.clone(), x.clone()], &h, 1, 0).unwrap().max_abs_diff <= 1e-12);
    let four: Vec<_> = (0..4).map(|_| rt([2, 3, 7, 7], &mut rng)).collect();
    assert!(verify_shared_weight_equivalence(&four, &h, 2, 1).unwrap().passed);
    assert_eq!(verify_shared_weight_equivalence(&[x], &h, 1, 1).unwrap().max_abs_diff, 0.0);
    let mismatched = [rt([1, 3, 5, 5], &mut rng), rt([1, 3, 4, 4], &mut rng)];
    assert!(verify_shared_weight_equivalence(&mismatched, &h, 1, 1).is_err());
}

#[test]
fn fuzzed_equivalences_hold() {
    for seed in [0, 1] {
        for r in fuzz_concat_sum(100, seed).unwrap().iter().chain(&fuzz_shared_weight(100, seed).unwrap()) {
            assert!(r.passed, "{}: {}", r.case, r.max_abs_diff);
        }
    }
}

fn big(v: &[u64]) -> Vec<BigUint> {
    v.iter().map(|&x| BigUint::from(x)).collect()
}

#[test]
fn dense_identity_coefficients() {
    assert_eq!(expand_dense_identity_coefficients(0), big(&[1]));
    assert_eq!(expand_dense_identity_coefficients(1), big(&[1, 1]));
    assert_eq!(expand_dense_identity_coefficients(2), big(&[2, 1, 1]));
    assert_eq!(expand_dense_identity_coefficients(3), big(&[4, 2, 1, 1]));
    let mut x0_history = vec![BigUint::from(1u32)];
    for l in 1..=12usize {
        let c = expand_dense_identity_coefficients(l);
        assert_eq!(c[0], BigUint::from(1u64 << (l - 1)));
        // c(l, X_0) = 1 + sum_{j=1}^{l-1} c(j, X_0)
        let rec: BigUint = BigUint::from(1u32) + x0_history[1..].iter().sum::<BigUint>();
        assert_eq!(c[0], rec);
        for (j, cj) in c.iter().enumerate().take(l) {
            assert_eq!(*cj, BigUint::from(1u64 << (l - 1 - j)));
        }
        x0_history.push(c[0].clone());

        let linear = linear_closed_form_coefficients(l);
        if l <= 2 {
            assert_eq!(linear, c);
        } else {
            assert_ne!(linear, c);
            assert_eq!(linear[0], BigUint::from(l));
        }
    }
}

#[test]
fn finite_difference_examples() {
    assert!((central_difference(|p: f64| p * p, 3.0, 1e-5) - 6.0).abs() <= 1e-9);
    let mut p = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.3, -0.7]).unwrap();
    let g = finite_diff_gradient(|t| 4.0 * t.data()[0] - 2.5 * t.data()[1], &mut p, 0.5);
    assert!((g.data()[0] - 4.0).abs() < 1e-12 && (g.data()[1] + 2.5).abs() < 1e-12);
    assert_eq!(p.data(), &[0.3, -0.7]);
}

fn tiny(variant: Variant) -> (Network<f64>, Tensor<f64>) {
    let cfg = NetworkConfig::tiny(variant, vec![2, 2], 8, 8, 10);
    let net = Network::build(&cfg, 7).unwrap();
    let x = rt([2, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(1));
    (net, x)
}

#[test]
fn frozen_network_yields_empty_passing_report() {
    let (mut net, x) = tiny(Variant::DsNet);
    for i in 0..net.params().len() {
        net.set_learnable(dsnet::ParamId(i), false);
    }
    let r = gradient_check(&mut net, &x, &[1, 4], 20, 1e-5, 1e-4, 3).unwrap();
    assert!(r.entries.is_empty() && r.passed);
}

#[test]
fn dsnet_gradient_check_covers_shortcut_weights() {
    let (mut net, x) = tiny(Variant::DsNet);
    let r = gradient_check(&mut net, &x, &[1, 4], 20, 1e-5, 1e-4, 3).unwrap();
    assert!(r.passed, "max rel err {} shortfall {:?}", r.max_rel_err, r.shortfall);
    // one weight vector per stage (32 and 64 channels), 20 coordinates each
    assert_eq!(r.entries_for(".ds.").count(), 40);
}

#[test]
fn ds2net_inner_weights_have_gradients() {
    let (mut net, x) = tiny(Variant::Ds2Net);
    let r = gradient_check(&mut net, &x, &[1, 4], 20, 1e-5, 1e-4, 3).unwrap();
    assert!(r.passed, "max rel err {} shortfall {:?}", r.max_rel_err, r.shortfall);
    let inner: Vec<_> = r.entries_for(".ds2.").collect();
    assert!(!inner.is_empty());
    assert!(inner.iter().any(|e| e.analytic != 0.0));
}
