//! Posterior mode and the Wald covariance of the MAP estimator.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CrossProductData, FactorModel, ThetaVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    /// Convergence threshold on the Euclidean norm of the gradient.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-6, max_iter: 500 }
    }
}

/// Result of a MAP search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFit {
    pub theta_hat: ThetaVector,
    pub log_posterior: f64,
    /// `−E[∇² log p]` at `theta_hat`, after any ridge repair. This is the
    /// precision matrix used by the Wald statistic.
    #[serde(with = "crate::io::matrix_rows")]
    pub neg_expected_hessian: DMatrix<f64>,
    /// Inverse of `neg_expected_hessian`.
    #[serde(with = "crate::io::matrix_rows")]
    pub sigma_theta_hat: DMatrix<f64>,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Ridge added to make `neg_expected_hessian` positive definite; 0 when
    /// no repair was needed.
    pub ridge: f64,
}

impl MapFit {
    pub fn ridge_repaired(&self) -> bool {
        self.ridge > 0.0
    }
}

/// Adds `εI`, `ε = 1e-8, 1e-7, …`, until the matrix admits a Cholesky factor.
/// Returns the repaired matrix, its inverse and `ε` (0 if untouched).
pub fn ridge_repair(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let sym = (h + h.transpose()) * 0.5;
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Ok((sym, chol.inverse(), 0.0));
    }
    let n = sym.nrows();
    let mut eps = 1e-8;
    for _ in 0..40 {
        let repaired = &sym + DMatrix::identity(n, n) * eps;
        if let Some(chol) = Cholesky::new(repaired.clone()) {
            return Ok((repaired, chol.inverse(), eps));
        }
        eps *= 10.0;
    }
    Err(Error::NotPositiveDefinite("negative expected Hessian beyond ridge repair"))
}

/// Maximizes the log posterior from `init`.
///
/// The inverse-Hessian approximation starts from the inverse negative
/// expected Hessian at `init`.
pub fn find_map(
    model: &FactorModel,
    data: &CrossProductData,
    init: &ThetaVector,
    options: &MapOptions,
) -> Result<MapFit> {
    let h0 = model.expected_hessian_log_posterior(data, init)?;
    let (_, inv_h0, _) = ridge_repair(&(-h0))?;
    find_map_from(model, data, init, &inv_h0, options)
}

/// Maximizes the log posterior from `init` with a caller-supplied initial
/// inverse Hessian of the negative log posterior (e.g. the covariance of a
/// nearby fit).
pub fn find_map_from(
    model: &FactorModel,
    data: &CrossProductData,
    init: &ThetaVector,
    inv_hessian: &DMatrix<f64>,
    options: &MapOptions,
) -> Result<MapFit> {
    let q = init.q();
    if inv_hessian.nrows() != q || inv_hessian.ncols() != q {
        return Err(Error::Dimension { expected: q, got: inv_hessian.nrows() });
    }
    let objective = |x: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        let theta = ThetaVector::new(x.clone()).ok()?;
        let (v, g) = model.value_and_gradient(data, &theta).ok()?;
        (v.is_finite() && g.iter().all(|x| x.is_finite())).then(|| (-v, -g))
    };

    let mut x = init.as_vector().clone();
    let (mut f, mut g) = objective(&x)
        .ok_or_else(|| Error::InvalidInput("log posterior not evaluable at the initial value".into()))?;
    let mut h = inv_hessian.clone();
    let mut iterations = 0;
    let mut converged = g.norm() <= options.grad_tol;

    while !converged && iterations < options.max_iter {
        iterations += 1;
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = DMatrix::identity(q, q) * (1.0 / g.norm().max(1.0));
            d = -(&h * &g);
            slope = g.dot(&d);
        }
        // Parameters live on log scales; cap the trial step.
        let dn = d.norm();
        if dn > 5.0 {
            d *= 5.0 / dn;
            slope *= 5.0 / dn;
        }

        let Some((t, x_new, f_new, g_new)) = backtrack(&objective, &x, f, slope, &d) else {
            if h == DMatrix::identity(q, q) * (1.0 / g.norm().max(1.0)) {
                break;
            }
            h = DMatrix::identity(q, q) * (1.0 / g.norm().max(1.0));
            continue;
        };

        let s = &d * t;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        converged = g.norm() <= options.grad_tol;
    }

    let theta_hat = ThetaVector::new(x)?;
    let hess = model.expected_hessian_log_posterior(data, &theta_hat)?;
    let (neg_expected_hessian, sigma_theta_hat, ridge) = ridge_repair(&(-hess))?;
    Ok(MapFit {
        theta_hat,
        log_posterior: -f,
        neg_expected_hessian,
        sigma_theta_hat,
        converged,
        grad_norm: g.norm(),
        iterations,
        ridge,
    })
}

type Trial = (f64, DVector<f64>, f64, DVector<f64>);

/// Armijo backtracking. Accepts a trial whose decrease is within rounding of
/// the current value, so the ascent stays monotone up to floating-point noise.
fn backtrack(
    objective: &impl Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
    x: &DVector<f64>,
    f: f64,
    slope: f64,
    d: &DVector<f64>,
) -> Option<Trial> {
    let slack = 4.0 * f64::EPSILON * f.abs().max(1.0);
    let mut t = 1.0;
    for _ in 0..60 {
        let trial = x + d * t;
        if let Some((f_new, g_new)) = objective(&trial) {
            if f_new <= f + 1e-4 * t * slope + slack {
                return Some((t, trial, f_new, g_new));
            }
        }
        t *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_init, generate_data, sample_standard_wishart};
    use crate::rng::{stream, Purpose};

    fn scene3_data(dof: usize, seed: u64) -> (ThetaVector, CrossProductData) {
        let theta = ThetaVector::from_natural(0.7, &[1.0; 5], &[0.3; 5]).unwrap();
        let u = sample_standard_wishart(5, dof, &mut stream(seed, Purpose::Data, 0, 0)).unwrap();
        let data = generate_data(&u, dof, &theta).unwrap();
        (theta, data)
    }

    #[test]
    fn converges_to_stationary_point() {
        let model = FactorModel::default();
        let (_, data) = scene3_data(99, 1);
        let fit = find_map(&model, &data, &default_init(&data), &MapOptions::default()).unwrap();
        assert!(fit.converged);
        let g = model.grad_log_posterior(&data, &fit.theta_hat).unwrap();
        assert!(g.norm() <= 1e-6);
        assert!(!fit.ridge_repaired());
        let prod = &fit.sigma_theta_hat * &fit.neg_expected_hessian;
        assert!((prod - DMatrix::identity(10, 10)).abs().max() < 1e-8);
    }

    #[test]
    fn consistent_at_large_dof() {
        let model = FactorModel::default();
        let (truth, data) = scene3_data(9_999, 2);
        let fit = find_map(&model, &data, &default_init(&data), &MapOptions::default()).unwrap();
        assert!(fit.converged);
        for (a, b) in fit.theta_hat.as_slice().iter().zip(truth.as_slice()) {
            assert!((a - b).abs() < 5e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn restart_from_optimum_is_fixed_point() {
        let model = FactorModel::default();
        let (_, data) = scene3_data(99, 3);
        let opts = MapOptions::default();
        let fit = find_map(&model, &data, &default_init(&data), &opts).unwrap();
        let again = find_map(&model, &data, &fit.theta_hat, &opts).unwrap();
        assert!((fit.theta_hat.as_vector() - again.theta_hat.as_vector()).norm() < 1e-8);
    }

    #[test]
    fn ridge_repair_escalates() {
        let mut h = DMatrix::identity(3, 3);
        h[(2, 2)] = -1e-7;
        let (fixed, inv, eps) = ridge_repair(&h).unwrap();
        assert!(eps >= 1e-7 && eps <= 1e-6 + 1e-12, "eps {eps}");
        assert!(Cholesky::new(fixed.clone()).is_some());
        assert!((fixed * inv - DMatrix::identity(3, 3)).abs().max() < 1e-6);
        let (_, _, none) = ridge_repair(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(none, 0.0);
    }

    #[test]
    fn ascent_never_decreases_log_posterior() {
        // Run the optimizer one iteration at a time and watch the objective.
        let model = FactorModel::default();
        let (_, data) = scene3_data(99, 4);
        let mut theta = default_init(&data);
        let mut last = model.log_posterior(&data, &theta).unwrap();
        for _ in 0..30 {
            let step = find_map(&model, &data, &theta, &MapOptions { grad_tol: 1e-6, max_iter: 1 }).unwrap();
            let lp = model.log_posterior(&data, &step.theta_hat).unwrap();
            assert!(lp >= last - 1e-12 * last.abs());
            last = lp;
            theta = step.theta_hat;
        }
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let model = FactorModel::default();
        let (_, data) = scene3_data(99, 5);
        let fit = find_map(&model, &data, &default_init(&data), &MapOptions { grad_tol: 1e-6, max_iter: 1 }).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
    }
}
