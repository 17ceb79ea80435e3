use calibayes::io::fmt_f64;
use calibayes::model::{generate_data, sample_standard_wishart, sigma_of_theta, CrossProductData, ThetaVector};
use calibayes::rng::{stream, Purpose};
use calibayes::sprsa::toy::GaussianLocation;
use calibayes::sprsa::{isotonic_nonincreasing, project_tangent, rates, retract, CalibrationTarget, TuningConstants};
use calibayes::stats::quantile_thresholds;
use nalgebra::{Cholesky, DVector};
use proptest::prelude::*;

fn theta_strategy(m: usize) -> impl Strategy<Value = ThetaVector> {
    prop::collection::vec(-2.0f64..2.0, 2 * m).prop_map(|v| ThetaVector::from_slice(&v).unwrap())
}

fn nonzero_vec(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
        .prop_map(DVector::from_vec)
        .prop_filter("nonzero", |v| v.norm() > 1e-3)
}

proptest! {
    #[test]
    fn sigma_is_symmetric_positive_definite(theta in theta_strategy(4)) {
        let s = theta.sigma().into_matrix();
        prop_assert_eq!(&s, &s.transpose());
        prop_assert!(Cholesky::new(s).is_some());
    }

    #[test]
    fn sigma_matches_config_path(theta in theta_strategy(5)) {
        let cfg = calibayes::model::FactorModelConfig::new(5, 100).unwrap();
        prop_assert_eq!(sigma_of_theta(&theta, &cfg).unwrap(), theta.sigma());
    }

    #[test]
    fn simulated_data_round_trips_through_csv(theta in theta_strategy(3), seed in any::<u64>()) {
        let u = sample_standard_wishart(3, 12, &mut stream(seed, Purpose::Data, 0, 0)).unwrap();
        let data = generate_data(&u, 12, &theta).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        prop_assert_eq!(CrossProductData::read_csv(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn float_format_round_trips(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let back: f64 = fmt_f64(x).parse().unwrap();
        prop_assert!(back == x);
    }

    #[test]
    fn projector_is_orthogonal_and_idempotent(g in nonzero_vec(7), v in nonzero_vec(7)) {
        let p = project_tangent(&v, &g);
        prop_assert!(p.dot(&g).abs() <= 1e-10 * p.norm().max(1e-300) * g.norm() + 1e-12);
        prop_assert!((project_tangent(&p, &g) - &p).norm() <= 1e-12 * v.norm().max(1.0));
    }

    #[test]
    fn retraction_lands_on_boundary(
        y in nonzero_vec(3),
        theta in nonzero_vec(3),
        h in nonzero_vec(3),
        xi in 0.1f64..30.0,
    ) {
        let target = GaussianLocation::new(y, 1.3).unwrap();
        prop_assume!((target.center() - (&theta + &h)).norm() > 1e-3);
        let r = retract(&target, &theta, &h, xi).unwrap();
        prop_assert!((target.observed_stat(&r).unwrap() - xi).abs() <= 1e-8 * xi.max(1.0));
    }

    #[test]
    fn rates_decrease(k in 1usize..1_000_000) {
        let t = TuningConstants::default();
        let (a0, c0) = rates(k, &t);
        let (a1, c1) = rates(k + 1, &t);
        prop_assert!(a1 < a0 && c1 < c0 && a1 > 0.0 && c1 > 0.0);
    }

    #[test]
    fn tuning_validity_matches_interval(beta in 0.0f64..1.5, delta in 0.01f64..0.49) {
        let ok = TuningConstants::new(0.1, beta, 0.05, delta, 10).is_ok();
        prop_assert_eq!(ok, beta > delta + 0.5 && beta <= 1.0);
    }

    #[test]
    fn isotonic_fit_is_monotone_and_mean_preserving(y in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let w = vec![1.0; y.len()];
        let fit = isotonic_nonincreasing(&y, &w);
        prop_assert_eq!(fit.len(), y.len());
        prop_assert!(fit.windows(2).all(|p| p[0] >= p[1] - 1e-15));
        let (a, b): (f64, f64) = (y.iter().sum(), fit.iter().sum());
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn thresholds_fall_with_nominal_level(values in prop::collection::vec(0.0f64..50.0, 2..200)) {
        let alphas: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let t = quantile_thresholds(&values, &alphas).unwrap();
        prop_assert!(t.windows(2).all(|p| p[0].xi() >= p[1].xi()));
    }

    #[test]
    fn streams_differ_by_key(seed in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        use rand::Rng;
        prop_assume!(a != b);
        let x: u64 = stream(seed, Purpose::Sprsa, a, 0).random();
        let y: u64 = stream(seed, Purpose::Sprsa, b, 0).random();
        prop_assert_ne!(x, y);
    }
}
