use proptest::prelude::*;

use capkernel::harness::{fit_log_curve, wilson};
use capkernel::io::{decode, encode, ContainerError};
use capkernel::regression::ridge_solve;
use capkernel::{linalg, rng, Matrix};

fn matrices(seed: u64, shapes: &[(usize, usize)]) -> Vec<Matrix> {
    let mut r = rng::stream(seed, &[]);
    shapes.iter().map(|&(a, b)| linalg::standard_normal(a, b, &mut r)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn containers_round_trip(shapes in prop::collection::vec((0usize..6, 0usize..6), 0..4), seed in any::<u64>()) {
        let ms = matrices(seed, &shapes);
        prop_assert_eq!(decode(&encode(&ms)).unwrap(), ms);
    }

    #[test]
    fn any_flipped_byte_is_detected(seed in any::<u64>(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode(&matrices(seed, &[(3, 2), (1, 4)]));
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode(&bytes).is_err());
    }

    #[test]
    fn ridge_solution_satisfies_the_system(n in 1usize..16, k in 1usize..8, kappa in 1e-6f64..1.0, seed in any::<u64>()) {
        let ms = matrices(seed, &[(n, k), (n, 2)]);
        let gram = &ms[0] * ms[0].transpose();
        let alpha = ridge_solve(&gram, &ms[1], kappa).unwrap();
        let shifted = &gram + Matrix::identity(n, n) * kappa;
        let residual = &shifted * &alpha - &ms[1];
        prop_assert!(linalg::max_norm(&residual) <= 1e-8 * linalg::max_norm(&ms[1]).max(1.0));
    }

    #[test]
    fn wilson_interval_is_proper(n in 0usize..10_000, frac in 0.0f64..=1.0) {
        let errors = (n as f64 * frac) as usize;
        let (p, half) = wilson(errors, n);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(half > 0.0 && half <= 0.5);
    }

    #[test]
    fn log_fit_recovers_exact_curves(c in 0.1f64..100.0) {
        let points: Vec<(usize, f64)> = (1..=6).map(|i| (8usize << i, c * ((8 << i) as f64 / 8.0).ln())).collect();
        let (fit, r2) = fit_log_curve(&points, 8).unwrap();
        prop_assert!((fit - c).abs() <= 1e-10 * c);
        prop_assert!(r2 > 1.0 - 1e-12);
    }
}

#[test]
fn truncated_containers_are_rejected() {
    let bytes = encode(&matrices(1, &[(2, 2)]));
    assert!(matches!(decode(&bytes[..3]), Err(ContainerError::BadMagic)));
    assert!(decode(&bytes[..bytes.len() - 1]).is_err());
}
