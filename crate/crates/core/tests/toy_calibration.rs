use calibayes::rng::{stream, Purpose};
use calibayes::sprsa::toy::GaussianLocation;
use calibayes::sprsa::{sprsa, TuningConstants};
use nalgebra::DVector;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tail(dof: f64, xi: f64) -> f64 {
    ChiSquared::new(dof).unwrap().sf(xi)
}

#[test]
fn scalar_location_matches_chi_square_tail() {
    let target = GaussianLocation::new(DVector::from_vec(vec![0.4]), 2.0).unwrap();
    let tuning = TuningConstants::default().with_iterations(20_000);
    for (i, xi) in [1.0, 2.71, 3.84].into_iter().enumerate() {
        let start = DVector::from_vec(vec![3.0]);
        let r = sprsa(&target, xi, &start, &tuning, false, &mut stream(40, Purpose::Sprsa, i as u64, 0)).unwrap();
        let want = tail(1.0, xi);
        assert!((r.alpha_hat_star - want).abs() <= 3.0 * r.mc_se, "xi {xi}: {} vs {want} (se {})", r.alpha_hat_star, r.mc_se);
    }
    assert!((tail(1.0, 3.84) - 0.05).abs() < 1e-3);
}

#[test]
fn higher_dimensional_location() {
    let target = GaussianLocation::new(DVector::from_vec(vec![1.0, -2.0, 0.5]), 0.5).unwrap();
    let tuning = TuningConstants::default().with_iterations(20_000);
    let start = DVector::from_vec(vec![0.0, 0.0, 0.0]);
    let r = sprsa(&target, 4.0, &start, &tuning, true, &mut stream(41, Purpose::Sprsa, 0, 0)).unwrap();
    let want = tail(3.0, 4.0);
    assert!((r.alpha_hat_star - want).abs() <= 3.0 * r.mc_se);
    assert!(r.trace.unwrap().iter().all(|e| (e.stat - 4.0).abs() <= 1e-6));
}
