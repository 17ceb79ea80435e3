#![allow(dead_code)]

use calibayes::map::{find_map, MapFit, MapOptions};
use calibayes::model::{default_init, generate_data, sample_standard_wishart, CrossProductData, FactorModel, ThetaVector};
use calibayes::rng::{stream, Purpose};

pub struct Fixture {
    pub model: FactorModel,
    pub truth: ThetaVector,
    pub data: CrossProductData,
    pub fit: MapFit,
}

/// m = 5, n = 100, fixed low communalities.
pub fn fixture(seed: u64) -> Fixture {
    fixture_with(0.3, 100, seed)
}

/// m = 5 with every communality `h2`.
pub fn fixture_with(h2: f64, n: usize, seed: u64) -> Fixture {
    let truth = ThetaVector::from_natural(h2, &[1.0; 5], &[1.0 - h2; 5]).unwrap();
    let u = sample_standard_wishart(5, n - 1, &mut stream(seed, Purpose::Data, 0, 0)).unwrap();
    let data = generate_data(&u, n - 1, &truth).unwrap();
    let model = FactorModel::default();
    let fit = find_map(&model, &data, &default_init(&data), &MapOptions::default()).unwrap();
    assert!(fit.converged);
    Fixture { model, truth, data, fit }
}
