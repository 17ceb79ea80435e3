//! Wald and posterior-density-ratio statistics and the credible regions they
//! generate.
//!
//! Both statistics vanish at the MAP and grow away from it, so
//! `D_ξ = {θ : T(θ) ≤ ξ}` is a nested family indexed by the threshold `ξ ≥ 0`.
//! Wald regions are ellipsoids; PDR regions are highest-posterior-density
//! sets.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::MapFit;
use crate::model::{CrossProductData, FactorModel, ThetaVector};

/// Gradient norms below this mark a point where the threshold is not a
/// regular value of the statistic.
pub const ZERO_GRADIENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatisticKind {
    Wald,
    Pdr,
}

impl StatisticKind {
    pub const ALL: [StatisticKind; 2] = [StatisticKind::Wald, StatisticKind::Pdr];

    pub fn name(self) -> &'static str {
        match self {
            StatisticKind::Wald => "wald",
            StatisticKind::Pdr => "pdr",
        }
    }
}

impl fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wald" => Ok(StatisticKind::Wald),
            "pdr" | "hpd" => Ok(StatisticKind::Pdr),
            other => Err(Error::Parse(format!("unknown statistic `{other}` (expected wald or pdr)"))),
        }
    }
}

/// Threshold `ξ` indexing the region `{θ : T(θ) ≤ ξ}`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RegionThreshold(f64);

impl RegionThreshold {
    pub fn new(xi: f64) -> Result<Self> {
        if !(xi >= 0.0) || !xi.is_finite() {
            return Err(Error::InvalidInput(format!("threshold must be finite and >= 0, got {xi}")));
        }
        Ok(Self(xi))
    }

    pub fn xi(self) -> f64 {
        self.0
    }
}

/// `(θ̂ − θ)ᵀ Σ̂⁻¹ (θ̂ − θ)`.
pub fn wald_stat(fit: &MapFit, theta: &ThetaVector) -> f64 {
    wald_form(fit, theta.as_vector())
}

fn wald_form(fit: &MapFit, theta: &DVector<f64>) -> f64 {
    let d = fit.theta_hat.as_vector() - theta;
    d.dot(&(&fit.neg_expected_hessian * &d))
}

/// `−2 [log p(θ | y) − log p(θ̂ | y)]`.
pub fn pdr_stat(model: &FactorModel, data: &CrossProductData, fit: &MapFit, theta: &ThetaVector) -> Result<f64> {
    Ok(-2.0 * (model.log_posterior(data, theta)? - fit.log_posterior))
}

/// A statistic bound to its observed data and MAP fit.
#[derive(Debug, Clone, Copy)]
pub struct Statistic<'a> {
    pub kind: StatisticKind,
    pub model: &'a FactorModel,
    pub data: &'a CrossProductData,
    pub fit: &'a MapFit,
}

impl<'a> Statistic<'a> {
    pub fn new(kind: StatisticKind, model: &'a FactorModel, data: &'a CrossProductData, fit: &'a MapFit) -> Self {
        Self { kind, model, data, fit }
    }

    pub fn value(&self, theta: &ThetaVector) -> Result<f64> {
        match self.kind {
            StatisticKind::Wald => Ok(wald_stat(self.fit, theta)),
            StatisticKind::Pdr => pdr_stat(self.model, self.data, self.fit, theta),
        }
    }

    /// Value at an arbitrary vector; non-finite parameters are rejected.
    pub fn value_at(&self, theta: &DVector<f64>) -> Result<f64> {
        match self.kind {
            StatisticKind::Wald => Ok(wald_form(self.fit, theta)),
            StatisticKind::Pdr => self.value(&ThetaVector::new(theta.clone())?),
        }
    }

    /// `∇_θ T`, without the regular-point check.
    pub fn raw_gradient(&self, theta: &ThetaVector) -> Result<DVector<f64>> {
        match self.kind {
            StatisticKind::Wald => {
                let d = self.fit.theta_hat.as_vector() - theta.as_vector();
                Ok(&self.fit.neg_expected_hessian * d * -2.0)
            }
            StatisticKind::Pdr => Ok(self.model.grad_log_posterior(self.data, theta)? * -2.0),
        }
    }

    /// `∇_θ T`; fails where the gradient vanishes.
    pub fn gradient(&self, theta: &ThetaVector) -> Result<DVector<f64>> {
        let g = self.raw_gradient(theta)?;
        let norm = g.norm();
        if norm < ZERO_GRADIENT_TOL {
            return Err(Error::NonRegularPoint { norm });
        }
        Ok(g)
    }

    pub fn contains(&self, theta: &ThetaVector, threshold: RegionThreshold) -> Result<bool> {
        Ok(self.value(theta)? <= threshold.xi())
    }
}

pub fn grad_stat(
    kind: StatisticKind,
    model: &FactorModel,
    data: &CrossProductData,
    fit: &MapFit,
    theta: &ThetaVector,
) -> Result<DVector<f64>> {
    Statistic::new(kind, model, data, fit).gradient(theta)
}

pub fn region_contains(
    kind: StatisticKind,
    model: &FactorModel,
    data: &CrossProductData,
    fit: &MapFit,
    theta: &ThetaVector,
    threshold: RegionThreshold,
) -> Result<bool> {
    Statistic::new(kind, model, data, fit).contains(theta, threshold)
}

/// Type-7 sample quantile (linear interpolation between order statistics)
/// of already sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Empirical `(1 − α)` quantiles of the statistic values, one per `α`.
pub fn quantile_thresholds(values: &[f64], alphas: &[f64]) -> Result<Vec<RegionThreshold>> {
    if values.is_empty() {
        return Err(Error::Empty("posterior draws"));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::InvalidInput(format!("nominal alpha {a} outside (0, 1)")));
    }
    let mut sorted = values.to_vec();
    if sorted.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN statistic value".into()));
    }
    sorted.sort_by(f64::total_cmp);
    alphas
        .iter()
        .map(|&a| RegionThreshold::new(quantile_sorted(&sorted, 1.0 - a).max(0.0)))
        .collect()
}

/// Thresholds at the `(1 − α)` posterior quantiles of the statistic.
pub fn posterior_quantile_thresholds(
    draws: &[ThetaVector],
    statistic: &Statistic<'_>,
    alphas: &[f64],
) -> Result<Vec<RegionThreshold>> {
    let values = draws.iter().map(|d| statistic.value(d)).collect::<Result<Vec<f64>>>()?;
    quantile_thresholds(&values, alphas)
}

/// The nominal grid `.05, .10, …, .95`.
pub fn nominal_alpha_grid(q: usize) -> Vec<f64> {
    (1..=q).map(|i| i as f64 / (q + 1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{find_map, MapOptions};
    use crate::model::{default_init, generate_data, sample_standard_wishart};
    use crate::rng::{stream, Purpose};
    use nalgebra::DMatrix;
    use rand::Rng;

    fn setup(seed: u64) -> (FactorModel, CrossProductData, MapFit) {
        let truth = ThetaVector::from_natural(0.5, &[1.0, 1.1, 0.9, 1.2, 0.8], &[0.5, 0.4, 0.6, 0.3, 0.5]).unwrap();
        let u = sample_standard_wishart(5, 99, &mut stream(seed, Purpose::Data, 0, 0)).unwrap();
        let data = generate_data(&u, 99, &truth).unwrap();
        let model = FactorModel::default();
        let fit = find_map(&model, &data, &default_init(&data), &MapOptions::default()).unwrap();
        assert!(fit.converged);
        (model, data, fit)
    }

    fn near_map<R: Rng>(fit: &MapFit, scale: f64, rng: &mut R) -> ThetaVector {
        let v = fit.theta_hat.as_vector().map(|x| x + scale * rng.random_range(-1.0..1.0));
        ThetaVector::new(v).unwrap()
    }

    #[test]
    fn zero_at_map() {
        let (model, data, fit) = setup(1);
        for kind in StatisticKind::ALL {
            let s = Statistic::new(kind, &model, &data, &fit);
            assert!(s.value(&fit.theta_hat).unwrap().abs() <= 1e-8);
        }
    }

    #[test]
    fn wald_unit_offset_with_identity_covariance() {
        let (_, _, mut fit) = setup(2);
        fit.neg_expected_hessian = DMatrix::identity(10, 10);
        let mut t = fit.theta_hat.as_vector().clone();
        t[3] += 1.0;
        assert!((wald_stat(&fit, &ThetaVector::new(t).unwrap()) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn wald_matches_scalar_double_loop() {
        let (_, _, fit) = setup(3);
        let mut rng = stream(3, Purpose::Simulation, 0, 0);
        for _ in 0..50 {
            let theta = near_map(&fit, 0.5, &mut rng);
            let d: Vec<f64> = (0..10).map(|i| fit.theta_hat.as_slice()[i] - theta.as_slice()[i]).collect();
            let mut want = 0.0;
            for i in 0..10 {
                for j in 0..10 {
                    want += d[i] * fit.neg_expected_hessian[(i, j)] * d[j];
                }
            }
            assert!((wald_stat(&fit, &theta) - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn pdr_nonnegative_and_shift_invariant() {
        let (model, data, fit) = setup(4);
        let mut rng = stream(4, Purpose::Simulation, 0, 0);
        for _ in 0..200 {
            let theta = near_map(&fit, 0.4, &mut rng);
            let t = pdr_stat(&model, &data, &fit, &theta).unwrap();
            assert!(t >= -1e-8);
            // adding a constant to the log posterior cancels in the difference
            let shifted = -2.0 * ((model.log_posterior(&data, &theta).unwrap() + 17.0) - (fit.log_posterior + 17.0));
            assert!((shifted - t).abs() < 1e-9 * t.abs().max(1.0));
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let (model, data, fit) = setup(5);
        let mut rng = stream(5, Purpose::Simulation, 0, 0);
        for kind in StatisticKind::ALL {
            let s = Statistic::new(kind, &model, &data, &fit);
            for _ in 0..20 {
                let theta = near_map(&fit, 0.3, &mut rng);
                let g = s.gradient(&theta).unwrap();
                let t = theta.as_slice();
                for i in 0..10 {
                    let h = 1e-6 * t[i].abs().max(1.0);
                    let mut p = t.to_vec();
                    let mut m = t.to_vec();
                    p[i] += h;
                    m[i] -= h;
                    let fd = (s.value(&ThetaVector::from_slice(&p).unwrap()).unwrap()
                        - s.value(&ThetaVector::from_slice(&m).unwrap()).unwrap())
                        / (2.0 * h);
                    assert!((g[i] - fd).abs() / g[i].abs().max(1.0) < 1e-5, "{kind} {i}: {} vs {fd}", g[i]);
                }
            }
        }
    }

    #[test]
    fn wald_gradient_linear_in_offset() {
        let (model, data, fit) = setup(6);
        let s = Statistic::new(StatisticKind::Wald, &model, &data, &fit);
        let v = DVector::from_fn(10, |i, _| 0.01 * (i as f64 + 1.0));
        let at = |scale: f64| s.gradient(&ThetaVector::new(fit.theta_hat.as_vector() + &v * scale).unwrap()).unwrap();
        let g1 = at(1.0);
        let g3 = at(3.0);
        assert!((g3 - g1 * 3.0).norm() < 1e-10);
    }

    #[test]
    fn gradients_vanish_at_map() {
        let (model, data, fit) = setup(7);
        for kind in StatisticKind::ALL {
            let s = Statistic::new(kind, &model, &data, &fit);
            assert!(s.raw_gradient(&fit.theta_hat).unwrap().norm() <= 2e-6);
        }
        let s = Statistic::new(StatisticKind::Wald, &model, &data, &fit);
        assert!(matches!(s.gradient(&fit.theta_hat), Err(Error::NonRegularPoint { .. })));
    }

    #[test]
    fn region_membership_is_thresholding() {
        let (model, data, fit) = setup(8);
        let mut rng = stream(8, Purpose::Simulation, 0, 0);
        for kind in StatisticKind::ALL {
            let s = Statistic::new(kind, &model, &data, &fit);
            assert!(s.contains(&fit.theta_hat, RegionThreshold::new(0.0).unwrap()).unwrap()
                || s.value(&fit.theta_hat).unwrap() > 0.0);
            assert!(s.contains(&fit.theta_hat, RegionThreshold::new(0.5).unwrap()).unwrap());
            for _ in 0..500 {
                let theta = near_map(&fit, 0.5, &mut rng);
                let xi = RegionThreshold::new(rng.random_range(0.0..30.0)).unwrap();
                let xi2 = RegionThreshold::new(xi.xi() + rng.random_range(0.0..5.0)).unwrap();
                let inside = s.contains(&theta, xi).unwrap();
                assert_eq!(inside, s.value(&theta).unwrap() <= xi.xi());
                if inside {
                    assert!(s.contains(&theta, xi2).unwrap());
                }
                // away from the MAP the zero region excludes everything
                assert!(!s.contains(&theta, RegionThreshold::new(0.0).unwrap()).unwrap());
            }
        }
    }

    #[test]
    fn midpoint_quantile() {
        let t = quantile_thresholds(&[1.0, 2.0, 3.0, 4.0], &[0.5]).unwrap();
        assert_eq!(t[0].xi(), 2.5);
        let t = quantile_thresholds(&[4.0, 1.0, 3.0, 2.0], &[0.25, 0.75]).unwrap();
        assert_eq!(t[0].xi(), 3.25);
        assert_eq!(t[1].xi(), 1.75);
        assert!(quantile_thresholds(&[], &[0.5]).is_err());
        assert!(quantile_thresholds(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn nominal_grid_has_nineteen_levels() {
        let g = nominal_alpha_grid(19);
        assert_eq!(g.len(), 19);
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[18] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn parse_kind() {
        assert_eq!("wald".parse::<StatisticKind>().unwrap(), StatisticKind::Wald);
        assert_eq!("PDR".parse::<StatisticKind>().unwrap(), StatisticKind::Pdr);
        assert!("score".parse::<StatisticKind>().is_err());
    }
}
