//! Gaussian location model with known scale, used to check the calibration
//! loop against closed-form answers.
//!
//! `Y ~ N(θ, σ² I)` in `d` dimensions with a flat prior, so the MAP is `y`
//! and `T(y, θ) = ‖y − θ‖²/σ²` is `χ²(d)` under every `θ`. The p-value is the
//! same at every boundary point: `P(χ²(d) ≥ ξ)`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use super::CalibrationTarget;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLocation {
    y: DVector<f64>,
    sigma: f64,
}

impl GaussianLocation {
    pub fn new(y: DVector<f64>, sigma: f64) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Empty("observation"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("scale {sigma} must be positive")));
        }
        Ok(Self { y, sigma })
    }
}

impl CalibrationTarget for GaussianLocation {
    type Noise = DVector<f64>;

    fn dim(&self) -> usize {
        self.y.len()
    }

    fn center(&self) -> &DVector<f64> {
        &self.y
    }

    fn observed_stat(&self, theta: &DVector<f64>) -> Result<f64> {
        Ok((&self.y - theta).norm_squared() / (self.sigma * self.sigma))
    }

    fn observed_stat_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((theta - &self.y) * (2.0 / (self.sigma * self.sigma)))
    }

    fn quadratic_along_rays(&self) -> bool {
        true
    }

    fn draw_noise(&self, rng: &mut StreamRng) -> DVector<f64> {
        DVector::from_fn(self.y.len(), |_, _| rng.sample(StandardNormal))
    }

    fn simulated_stat(&self, noise: &DVector<f64>, _theta: &DVector<f64>) -> Result<Option<f64>> {
        // y* = θ + σu, so the refit MAP is y* and the statistic is ‖u‖²
        Ok(Some(noise.norm_squared()))
    }
}
