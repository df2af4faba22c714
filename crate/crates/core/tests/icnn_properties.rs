use idvae::decoder::{check_injectivity, ExpFamilyHead, InjectiveDecoder};
use idvae::icnn::{brenier_map, check_brenier_fd, check_convexity, check_monotone, icnn_eval, IcnnParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn network(seed: u64, dim: usize, quadratic: f64) -> IcnnParams {
    IcnnParams::init(dim, &[8, 8], quadratic, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn potential_is_convex_along_segments(seed in 0u64..10_000, dim in 1usize..5, t in 0.0f64..=1.0,
                                          u in prop::collection::vec(-3.0f64..3.0, 4), v in prop::collection::vec(-3.0f64..3.0, 4)) {
        let p = network(seed, dim, 0.0);
        let (u, v) = (&u[..dim], &v[..dim]);
        let m: Vec<f64> = u.iter().zip(v).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let gap = icnn_eval(&p, &m).unwrap() - t * icnn_eval(&p, u).unwrap() - (1.0 - t) * icnn_eval(&p, v).unwrap();
        prop_assert!(gap <= 1e-9, "gap {gap}");
    }

    #[test]
    fn brenier_map_is_monotone(seed in 0u64..10_000, dim in 1usize..5,
                               u in prop::collection::vec(-3.0f64..3.0, 4), v in prop::collection::vec(-3.0f64..3.0, 4)) {
        let p = network(seed, dim, 0.0);
        let (u, v) = (&u[..dim], &v[..dim]);
        let (gu, gv) = (brenier_map(&p, u).unwrap(), brenier_map(&p, v).unwrap());
        let inner: f64 = (0..dim).map(|j| (gu[j] - gv[j]) * (u[j] - v[j])).sum();
        prop_assert!(inner >= -1e-9);
    }

    #[test]
    fn quadratic_term_separates_images(seed in 0u64..10_000, c in 0.1f64..2.0,
                                       u in prop::collection::vec(-3.0f64..3.0, 3), v in prop::collection::vec(-3.0f64..3.0, 3)) {
        let p = network(seed, 3, c);
        let (gu, gv) = (brenier_map(&p, &u).unwrap(), brenier_map(&p, &v).unwrap());
        let dg: f64 = gu.iter().zip(&gv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let du: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(dg >= c * du - 1e-9);
    }

    #[test]
    fn projection_restores_convexity(seed in 0u64..1000) {
        let mut p = network(seed, 2, 0.0);
        for w in p.w.iter_mut().skip(1) {
            w.values_mut().iter_mut().for_each(|v| *v = -v.abs() - 0.5);
        }
        prop_assert!(p.validate().is_err());
        let q = idvae::icnn::project_convex(&p);
        prop_assert!(q.validate().is_ok());
        prop_assert_eq!(check_convexity(&q, 200, 1e-9, seed).unwrap().violations, 0);
    }
}

#[test]
fn negative_weights_can_break_convexity() {
    let mut p = network(1, 1, 0.0);
    for w in p.w.iter_mut().skip(1) {
        w.values_mut().iter_mut().for_each(|v| *v = -5.0);
    }
    let report = check_convexity(&p, 2000, 1e-9, 0).unwrap();
    assert!(report.violations > 0 || check_monotone(&p, 2000, 1e-9, 0).unwrap().violations > 0);
}

#[test]
fn brenier_map_matches_finite_differences_away_from_kinks() {
    for seed in 0..10 {
        let r = check_brenier_fd(&network(seed, 3, 1.0), 20, 1e-6, 1e-3, seed).unwrap();
        assert!(r.max_rel_err < 1e-5, "seed {seed}: {}", r.max_rel_err);
    }
}

#[test]
fn deep_decoders_are_injective() {
    for seed in 0..5 {
        let dec = InjectiveDecoder::deep(&[2, 3, 5], &[8], 1.0, ExpFamilyHead::gaussian(1.0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let r = check_injectivity(&dec, 1000, 0.1, seed).unwrap();
        assert!(r.min_separation > 0.0 && r.violations == 0);
    }
}
