//! Randomized properties of the rate model, surrogates and allocation helpers.

use nalgebra::{DMatrix, DVector};
use nearfield_rsma::model::{mix_seed, near_field_response, NoiseModel, SystemConfig};
use nearfield_rsma::rates::{water_fill, LinkModel};
use nearfield_rsma::surrogate::{build_surrogate, StreamKind};
use nearfield_rsma::twostage::RfAllocation;
use nearfield_rsma::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cvec(parts: &[(f64, f64)]) -> Vec<Complex64> {
    parts.iter().map(|&(re, im)| Complex64::new(re, im)).collect()
}

fn entries(n: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn surrogate_minorizes_exact_rate(
        h0 in entries(4), h1 in entries(4), pt in entries(12), p in entries(12),
        eps in 0.0..0.05f64, delta in 0.0..1.0f64, scale in 0.1..3.0f64,
    ) {
        let model = LinkModel {
            channels: vec![DVector::from_vec(cvec(&h0)), DVector::from_vec(cvec(&h1))],
            eps2: vec![eps, eps / 2.0],
            sigma2: vec![0.1, 0.2],
            power_scale: 1.0,
        };
        let p_tilde = DMatrix::from_vec(4, 3, cvec(&pt));
        let p = DMatrix::from_vec(4, 3, cvec(&p)) * Complex64::from(scale);
        prop_assume!(p_tilde.norm() > 1e-3);
        for k in 0..2 {
            for kind in [StreamKind::Common, StreamKind::Private] {
                let s = build_surrogate(&model, &p_tilde, delta, k, kind).unwrap();
                let exact = match kind {
                    StreamKind::Common => model.common_rate(&p, k),
                    StreamKind::Private => model.private_rate(&p, delta, k),
                };
                prop_assert!(s.value(&p, NoiseModel::Exact) <= exact + 1e-9);
                let at = match kind {
                    StreamKind::Common => model.common_rate(&p_tilde, k),
                    StreamKind::Private => model.private_rate(&p_tilde, delta, k),
                };
                prop_assert!((s.value(&p_tilde, NoiseModel::Exact) - at).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn water_fill_splits_the_common_rate(total in 0.0..5.0f64, private in prop::collection::vec(0.0..5.0f64, 1..6)) {
        let alloc = water_fill(total, &private);
        let used: f64 = alloc.common.iter().sum();
        prop_assert!(alloc.common.iter().all(|&c| c >= -1e-12));
        prop_assert!(used <= total + 1e-9);
        let worst = private.iter().zip(&alloc.common).map(|(r, c)| r + c).fold(f64::INFINITY, f64::min);
        prop_assert!((worst - alloc.maxmin).abs() <= 1e-9);
        let floor = private.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(alloc.maxmin >= floor - 1e-12);
        prop_assert!(alloc.maxmin <= floor + total + 1e-9);
    }

    #[test]
    fn balanced_allocations_are_balanced(users in 1usize..6, extra in 0usize..12, seed in any::<u64>()) {
        let chains = users + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alloc = RfAllocation::balanced_random(chains, users, &mut rng).unwrap();
        prop_assert_eq!(alloc.chains(), chains);
        prop_assert!(alloc.is_balanced(users));
    }

    #[test]
    fn responses_have_unit_modulus(r in 2.0..60.0f64, theta in -1.5..1.5f64) {
        let cfg = SystemConfig::with_dims(16, 4, 2);
        let a = near_field_response(&cfg, r, theta).unwrap();
        prop_assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn seed_mixing_is_order_sensitive(a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(mix_seed(&[a, b]), mix_seed(&[a, b]));
        if a != b {
            prop_assert_ne!(mix_seed(&[a, b]), mix_seed(&[b, a]));
        }
    }
}
