use nalgebra::{DMatrix, DVector};

use super::CalibrationTarget;
use crate::error::Result;
use crate::map::{find_map_from, MapFit, MapOptions};
use crate::model::{generate_data, sample_standard_wishart, CrossProductData, FactorModel, ThetaVector};
use crate::rng::StreamRng;
use crate::stats::{Statistic, StatisticKind};

/// The one-factor model with its observed data and MAP fit.
///
/// Simulated datasets are `Σ(θ)^{1/2} U Σ(θ)^{1/2}` with `U ~ Wish(I, ν)`.
/// Their MAP searches start from the observed MAP and its covariance.
#[derive(Debug, Clone, Copy)]
pub struct FactorTarget<'a> {
    pub statistic: Statistic<'a>,
    pub options: MapOptions,
}

impl<'a> FactorTarget<'a> {
    pub fn new(kind: StatisticKind, model: &'a FactorModel, data: &'a CrossProductData, fit: &'a MapFit) -> Self {
        Self { statistic: Statistic::new(kind, model, data, fit), options: MapOptions::default() }
    }

    fn theta(&self, v: &DVector<f64>) -> Result<ThetaVector> {
        ThetaVector::new(v.clone())
    }
}

impl CalibrationTarget for FactorTarget<'_> {
    type Noise = DMatrix<f64>;

    fn dim(&self) -> usize {
        self.statistic.fit.theta_hat.q()
    }

    fn center(&self) -> &DVector<f64> {
        self.statistic.fit.theta_hat.as_vector()
    }

    fn observed_stat(&self, theta: &DVector<f64>) -> Result<f64> {
        self.statistic.value_at(theta)
    }

    fn observed_stat_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.statistic.raw_gradient(&self.theta(theta)?)
    }

    fn quadratic_along_rays(&self) -> bool {
        self.statistic.kind == StatisticKind::Wald
    }

    fn draw_noise(&self, rng: &mut StreamRng) -> DMatrix<f64> {
        let data = self.statistic.data;
        sample_standard_wishart(data.m(), data.dof(), rng).expect("dof validated with the data")
    }

    fn simulated_stat(&self, noise: &DMatrix<f64>, theta: &DVector<f64>) -> Result<Option<f64>> {
        let s = &self.statistic;
        let theta = self.theta(theta)?;
        let Ok(sim) = generate_data(noise, s.data.dof(), &theta) else {
            return Ok(None);
        };
        let fit = match find_map_from(s.model, &sim, &s.fit.theta_hat, &s.fit.sigma_theta_hat, &self.options) {
            Ok(f) if f.converged => f,
            _ => return Ok(None),
        };
        Ok(Statistic::new(s.kind, s.model, &sim, &fit).value(&theta).ok())
    }
}
