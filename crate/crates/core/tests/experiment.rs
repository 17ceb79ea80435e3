use calibayes::experiment::{communalities, generate_scene_theta, original_contour, Scene, SceneSpec};
use calibayes::map::{find_map, MapOptions};
use calibayes::mcmc::{run_mcmc, McmcConfig};
use calibayes::model::{default_init, generate_data, sample_standard_wishart, FactorModel, ThetaVector};
use calibayes::rng::{stream, Purpose};
use calibayes::stats::{posterior_quantile_thresholds, Statistic, StatisticKind};

#[test]
fn contour_is_largest_level_whose_region_contains_the_point() {
    let truth = ThetaVector::from_natural(0.3, &[1.0; 5], &[0.7; 5]).unwrap();
    let u = sample_standard_wishart(5, 99, &mut stream(70, Purpose::Data, 0, 0)).unwrap();
    let data = generate_data(&u, 99, &truth).unwrap();
    let model = FactorModel::default();
    let fit = find_map(&model, &data, &default_init(&data), &MapOptions::default()).unwrap();
    let config = McmcConfig { burnin_iters: 1000, retain_iters: 2000, thin: 2, seed: 70, ..McmcConfig::default() };
    let draws = run_mcmc(&model, &data, &config, &fit.theta_hat).unwrap();
    let thetas = draws.thetas().unwrap();

    let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
    let points = [truth.clone(), ThetaVector::new(fit.theta_hat.as_vector().map(|v| v + 0.05)).unwrap()];
    for kind in StatisticKind::ALL {
        let s = Statistic::new(kind, &model, &data, &fit);
        let thresholds = posterior_quantile_thresholds(&thetas, &s, &grid).unwrap();
        for theta in &points {
            let contour = original_contour(&s, &draws, theta).unwrap();
            let sup = grid
                .iter()
                .zip(&thresholds)
                .filter(|(_, t)| s.contains(theta, **t).unwrap())
                .map(|(&a, _)| a)
                .fold(0.0, f64::max);
            let tol = 1.0 / thetas.len() as f64 + 1e-3;
            assert!((contour - sup).abs() <= tol, "{kind}: contour {contour} vs sup {sup}");
        }
    }
}

#[test]
fn uniform_scene_communalities_centre_on_one_half() {
    let spec = SceneSpec { replications: 512, ..SceneSpec::new(Scene::UniformCommunality, 5) };
    let mut values = Vec::new();
    for r in 0..spec.replications as u64 {
        let theta = generate_scene_theta(&spec, &mut stream(spec.seed, Purpose::SceneTheta, r, 0)).unwrap();
        values.extend(communalities(&theta).iter().copied());
    }
    assert!(values.iter().all(|h| (0.2..=0.8).contains(h)));
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = 0.6 / 12f64.sqrt() / n.sqrt();
    assert!((mean - 0.5).abs() <= 3.0 * se, "mean communality {mean}");
}
