use calibayes::map::{find_map, MapOptions};
use calibayes::model::{default_init, generate_data, sample_standard_wishart, FactorModel, ThetaVector};
use calibayes::rng::{stream, Purpose};
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn perturbed_starts_reach_the_same_optimum() {
    let truth = ThetaVector::from_natural(0.5, &[1.0; 5], &[0.5; 5]).unwrap();
    let model = FactorModel::default();
    let opts = MapOptions::default();
    let datasets = 200;
    let mut agree = 0;
    for d in 0..datasets {
        let u = sample_standard_wishart(5, 99, &mut stream(60, Purpose::Data, d, 0)).unwrap();
        let data = generate_data(&u, 99, &truth).unwrap();
        let init = default_init(&data);
        let base = find_map(&model, &data, &init, &opts).unwrap();
        let mut rng = stream(60, Purpose::Simulation, d, 0);
        let all_same = (0..5).all(|_| {
            let start = init.as_vector().map(|v| v + 0.2 * rng.sample::<f64, _>(StandardNormal));
            let fit = find_map(&model, &data, &ThetaVector::new(start).unwrap(), &opts).unwrap();
            (fit.log_posterior - base.log_posterior).abs() <= 1e-6
        });
        agree += all_same as usize;
    }
    assert!(agree as f64 >= 0.95 * datasets as f64, "{agree} of {datasets} datasets agree");
}
