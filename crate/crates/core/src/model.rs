//! One-factor covariance-structure model.
//!
//! The response covariance is `Σ(θ) = ψ λ λᵀ + Diag(υ)` with `λ₁ ≡ 1`,
//! `ψ = exp(2ζ)` and `υⱼ = exp(2ωⱼ)`. The unconstrained parameter vector is
//! ordered `(ζ, λ₂, …, λₘ, ω₁, …, ωₘ)`, so `q = 2m`.
//!
//! Data enter only through the cross-product matrix `Y ~ Wish(Σ(θ), n − 1)`.
//! Log densities drop every term that does not depend on `θ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Sample size and number of response variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorModelConfig {
    pub m: usize,
    pub n: usize,
}

impl FactorModelConfig {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m < 3 {
            return Err(Error::InvalidConfig(format!(
                "one-factor model needs m >= 3 for identification, got m = {m}"
            )));
        }
        if n < m + 1 {
            return Err(Error::InvalidConfig(format!(
                "Wishart degrees of freedom n - 1 = {} must be at least m = {m}",
                n.saturating_sub(1)
            )));
        }
        Ok(Self { m, n })
    }

    pub fn q(&self) -> usize {
        2 * self.m
    }

    pub fn dof(&self) -> usize {
        self.n - 1
    }
}

/// Unconstrained parameter vector `(ζ, λ₂..λₘ, ω₁..ωₘ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThetaVector(DVector<f64>);

impl ThetaVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        let q = values.len();
        if q < 6 || q % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "theta must have even length 2m with m >= 3, got {q}"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("theta has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    /// Builds theta from its blocks; `loadings` holds `λ₂..λₘ`.
    pub fn from_parts(zeta: f64, loadings: &[f64], omegas: &[f64]) -> Result<Self> {
        if loadings.len() + 1 != omegas.len() {
            return Err(Error::Dimension { expected: omegas.len() - 1, got: loadings.len() });
        }
        let values: Vec<f64> = std::iter::once(zeta)
            .chain(loadings.iter().copied())
            .chain(omegas.iter().copied())
            .collect();
        Self::from_slice(&values)
    }

    /// Builds theta from variances and the full loading vector (`λ₁` must be 1).
    pub fn from_natural(psi: f64, lambda: &[f64], upsilon: &[f64]) -> Result<Self> {
        if lambda.len() != upsilon.len() {
            return Err(Error::Dimension { expected: upsilon.len(), got: lambda.len() });
        }
        if (lambda[0] - 1.0).abs() > 0.0 {
            return Err(Error::InvalidInput("the first loading is fixed at 1".into()));
        }
        if psi <= 0.0 || upsilon.iter().any(|&u| u <= 0.0) {
            return Err(Error::InvalidInput("variances must be positive".into()));
        }
        let omegas: Vec<f64> = upsilon.iter().map(|u| 0.5 * u.ln()).collect();
        Self::from_parts(0.5 * psi.ln(), &lambda[1..], &omegas)
    }

    pub fn zeros(m: usize) -> Result<Self> {
        Self::new(DVector::zeros(2 * m))
    }

    pub fn m(&self) -> usize {
        self.0.len() / 2
    }

    pub fn q(&self) -> usize {
        self.0.len()
    }

    pub fn zeta(&self) -> f64 {
        self.0[0]
    }

    pub fn omega(&self, j: usize) -> f64 {
        self.0[self.m() + j]
    }

    /// Common-factor variance `ψ`.
    pub fn psi(&self) -> f64 {
        (2.0 * self.zeta()).exp()
    }

    /// Full loading vector with `λ₁ = 1`.
    pub fn lambda(&self) -> DVector<f64> {
        let m = self.m();
        DVector::from_fn(m, |j, _| if j == 0 { 1.0 } else { self.0[j] })
    }

    /// Unique variances `υⱼ`.
    pub fn upsilon(&self) -> DVector<f64> {
        let m = self.m();
        DVector::from_fn(m, |j, _| (2.0 * self.0[m + j]).exp())
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    /// Implied covariance `Σ(θ)`.
    pub fn sigma(&self) -> CovarianceMatrix {
        let psi = self.psi();
        let lambda = self.lambda();
        let upsilon = self.upsilon();
        let mut s = &lambda * lambda.transpose() * psi;
        for j in 0..self.m() {
            s[(j, j)] += upsilon[j];
        }
        CovarianceMatrix(s)
    }
}

impl TryFrom<Vec<f64>> for ThetaVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<ThetaVector> for Vec<f64> {
    fn from(t: ThetaVector) -> Self {
        t.0.as_slice().to_vec()
    }
}

/// Symmetric positive-definite response covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix(DMatrix<f64>);

impl CovarianceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// `Σ(θ)` checked against the model configuration.
pub fn sigma_of_theta(theta: &ThetaVector, config: &FactorModelConfig) -> Result<CovarianceMatrix> {
    if theta.m() != config.m {
        return Err(Error::Dimension { expected: config.q(), got: theta.q() });
    }
    Ok(theta.sigma())
}

/// The sufficient statistic `Y` and its degrees of freedom `n − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossProductData {
    y: DMatrix<f64>,
    dof: usize,
}

impl CrossProductData {
    pub fn new(y: DMatrix<f64>, dof: usize) -> Result<Self> {
        let m = y.nrows();
        if y.ncols() != m {
            return Err(Error::Dimension { expected: m, got: y.ncols() });
        }
        if m < 3 {
            return Err(Error::InvalidInput(format!("need m >= 3, got {m}")));
        }
        if dof < m {
            return Err(Error::InvalidInput(format!("dof {dof} must be at least m = {m}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("cross-product matrix has non-finite entries".into()));
        }
        for i in 0..m {
            for j in 0..i {
                if (y[(i, j)] - y[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "cross-product matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if Cholesky::new(y.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("cross-product matrix"));
        }
        Ok(Self { y, dof })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn m(&self) -> usize {
        self.y.nrows()
    }

    pub fn config(&self) -> FactorModelConfig {
        FactorModelConfig { m: self.m(), n: self.dof + 1 }
    }
}

/// Prior on the factor loadings `λ₂..λₘ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadingPrior {
    /// Improper uniform prior; contributes nothing.
    Flat,
    /// Independent `N(0, variance)`, e.g. the diffuse `N(0, 1e10)` surrogate.
    Normal { variance: f64 },
}

/// Inverse-gamma prior on `ψ` and every `υⱼ`, expressed on the log-SD scale.
///
/// The inverse-gamma density is `b^a / Γ(a) · v^{-a-1} · exp(-b / v)`. With
/// `v = exp(2s)` the density of `s` is
/// `b^a / Γ(a) · 2 · exp(-2 a s - b exp(-2s))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub variance_shape: f64,
    pub variance_scale: f64,
    pub loadings: LoadingPrior,
}

impl Default for Prior {
    fn default() -> Self {
        Self { variance_shape: 1.0, variance_scale: 2.0, loadings: LoadingPrior::Flat }
    }
}

impl Prior {
    /// Normalized log density of one log-SD coordinate.
    pub fn log_sd_density(&self, s: f64) -> f64 {
        let (a, b) = (self.variance_shape, self.variance_scale);
        a * b.ln() - ln_gamma(a) + std::f64::consts::LN_2 - 2.0 * a * s - b * (-2.0 * s).exp()
    }

    fn log_sd_gradient(&self, s: f64) -> f64 {
        let (a, b) = (self.variance_shape, self.variance_scale);
        -2.0 * a + 2.0 * b * (-2.0 * s).exp()
    }

    fn log_sd_curvature(&self, s: f64) -> f64 {
        -4.0 * self.variance_scale * (-2.0 * s).exp()
    }

    pub fn log_density(&self, theta: &ThetaVector) -> f64 {
        let m = theta.m();
        let t = theta.as_slice();
        let mut lp = self.log_sd_density(t[0]);
        for &w in &t[m..] {
            lp += self.log_sd_density(w);
        }
        if let LoadingPrior::Normal { variance } = self.loadings {
            let norm = -0.5 * (2.0 * std::f64::consts::PI * variance).ln();
            for &l in &t[1..m] {
                lp += norm - 0.5 * l * l / variance;
            }
        }
        lp
    }

    fn add_gradient(&self, theta: &ThetaVector, grad: &mut DVector<f64>) {
        let m = theta.m();
        let t = theta.as_slice();
        grad[0] += self.log_sd_gradient(t[0]);
        for j in 0..m {
            grad[m + j] += self.log_sd_gradient(t[m + j]);
        }
        if let LoadingPrior::Normal { variance } = self.loadings {
            for j in 1..m {
                grad[j] -= t[j] / variance;
            }
        }
    }

    fn add_hessian(&self, theta: &ThetaVector, hess: &mut DMatrix<f64>) {
        let m = theta.m();
        let t = theta.as_slice();
        hess[(0, 0)] += self.log_sd_curvature(t[0]);
        for j in 0..m {
            hess[(m + j, m + j)] += self.log_sd_curvature(t[m + j]);
        }
        if let LoadingPrior::Normal { variance } = self.loadings {
            for j in 1..m {
                hess[(j, j)] -= 1.0 / variance;
            }
        }
    }
}

/// Log posterior of the one-factor model under a given prior.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FactorModel {
    pub prior: Prior,
}

/// `Σ`, its Cholesky factor and `Σ⁻¹`, shared by the value and derivatives.
struct Factorized {
    psi: f64,
    lambda: DVector<f64>,
    upsilon: DVector<f64>,
    log_det: f64,
    inv: DMatrix<f64>,
}

fn factorize(theta: &ThetaVector) -> Result<Factorized> {
    let psi = theta.psi();
    let lambda = theta.lambda();
    let upsilon = theta.upsilon();
    let sigma = theta.sigma().into_matrix();
    let chol = Cholesky::new(sigma).ok_or(Error::NotPositiveDefinite("Σ(θ)"))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = chol.inverse();
    if !log_det.is_finite() || inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("Σ(θ)"));
    }
    Ok(Factorized { psi, lambda, upsilon, log_det, inv })
}

fn check_dims(data: &CrossProductData, theta: &ThetaVector) -> Result<()> {
    if theta.m() != data.m() {
        return Err(Error::Dimension { expected: 2 * data.m(), got: theta.q() });
    }
    Ok(())
}

impl FactorModel {
    pub fn new(prior: Prior) -> Self {
        Self { prior }
    }

    /// `-(n-1)/2 log|Σ| - tr(Σ⁻¹ Y)/2`.
    pub fn log_likelihood(&self, data: &CrossProductData, theta: &ThetaVector) -> Result<f64> {
        check_dims(data, theta)?;
        let f = factorize(theta)?;
        Ok(likelihood_from(&f, data))
    }

    pub fn log_prior(&self, theta: &ThetaVector) -> f64 {
        self.prior.log_density(theta)
    }

    pub fn log_posterior(&self, data: &CrossProductData, theta: &ThetaVector) -> Result<f64> {
        Ok(self.log_likelihood(data, theta)? + self.log_prior(theta))
    }

    pub fn grad_log_posterior(&self, data: &CrossProductData, theta: &ThetaVector) -> Result<DVector<f64>> {
        Ok(self.value_and_gradient(data, theta)?.1)
    }

    /// Log posterior and its gradient from a single factorization.
    pub fn value_and_gradient(
        &self,
        data: &CrossProductData,
        theta: &ThetaVector,
    ) -> Result<(f64, DVector<f64>)> {
        check_dims(data, theta)?;
        let f = factorize(theta)?;
        let m = theta.m();
        let nu = data.dof() as f64;
        let value = likelihood_from(&f, data) + self.log_prior(theta);

        // ∂ℓ/∂θₐ = tr(W ∂Σ/∂θₐ) / 2 with W = Σ⁻¹ Y Σ⁻¹ − ν Σ⁻¹.
        let mut w = &f.inv * data.y() * &f.inv;
        w -= &f.inv * nu;
        let w_lambda = &w * &f.lambda;

        let mut grad = DVector::zeros(2 * m);
        grad[0] = f.psi * f.lambda.dot(&w_lambda);
        for j in 1..m {
            grad[j] = f.psi * w_lambda[j];
        }
        for j in 0..m {
            grad[m + j] = f.upsilon[j] * w[(j, j)];
        }
        self.prior.add_gradient(theta, &mut grad);
        Ok((value, grad))
    }

    /// `E_{Y|θ}[∇² log p(θ | Y)]`: minus the Wishart Fisher information plus
    /// the prior curvature.
    pub fn expected_hessian_log_posterior(
        &self,
        data: &CrossProductData,
        theta: &ThetaVector,
    ) -> Result<DMatrix<f64>> {
        check_dims(data, theta)?;
        let f = factorize(theta)?;
        let m = theta.m();
        let q = 2 * m;
        let nu = data.dof() as f64;

        // Aₐ = Σ⁻¹ ∂Σ/∂θₐ, built from the rank-one/rank-two derivative structure.
        let inv_lambda = &f.inv * &f.lambda;
        let mut a = Vec::with_capacity(q);
        a.push(&inv_lambda * f.lambda.transpose() * (2.0 * f.psi));
        for j in 1..m {
            let mut aj = DMatrix::zeros(m, m);
            for r in 0..m {
                for c in 0..m {
                    aj[(r, c)] = f.psi * f.inv[(r, j)] * f.lambda[c];
                }
                aj[(r, j)] += f.psi * inv_lambda[r];
            }
            a.push(aj);
        }
        for j in 0..m {
            let mut aj = DMatrix::zeros(m, m);
            for r in 0..m {
                aj[(r, j)] = 2.0 * f.upsilon[j] * f.inv[(r, j)];
            }
            a.push(aj);
        }

        let mut hess = DMatrix::zeros(q, q);
        for i in 0..q {
            for k in i..q {
                // tr(Aᵢ Aₖ)
                let mut tr = 0.0;
                for r in 0..m {
                    for c in 0..m {
                        tr += a[i][(r, c)] * a[k][(c, r)];
                    }
                }
                let v = -0.5 * nu * tr;
                hess[(i, k)] = v;
                hess[(k, i)] = v;
            }
        }
        self.prior.add_hessian(theta, &mut hess);
        Ok(hess)
    }
}

fn likelihood_from(f: &Factorized, data: &CrossProductData) -> f64 {
    let nu = data.dof() as f64;
    let tr = f.inv.component_mul(data.y()).sum();
    -0.5 * nu * f.log_det - 0.5 * tr
}

/// One draw from `Wish(I, dof)` by the Bartlett construction.
pub fn sample_standard_wishart<R: Rng + ?Sized>(m: usize, dof: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let factor = bartlett_factor(m, dof, rng)?;
    Ok(&factor * factor.transpose())
}

/// Lower-triangular Bartlett factor `L` with `L Lᵀ ~ Wish(I, dof)`:
/// `Lᵢᵢ² ~ χ²(dof − i)` (zero-based `i`) and standard normal entries below
/// the diagonal. Entries are drawn row by row.
pub fn bartlett_factor<R: Rng + ?Sized>(m: usize, dof: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if dof < m {
        return Err(Error::InvalidInput(format!("Wishart dof {dof} must be at least m = {m}")));
    }
    let mut l = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..i {
            l[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
        let chi = ChiSquared::new((dof - i) as f64).expect("positive degrees of freedom");
        l[(i, i)] = chi.sample(rng).sqrt();
    }
    Ok(l)
}

/// Symmetric square root of an SPD matrix.
pub fn symmetric_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::<f64, Dyn>::new(s.clone());
    if eig.eigenvalues.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("matrix square root argument"));
    }
    let roots = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// `Y = Σ(θ)^{1/2} U Σ(θ)^{1/2}`; `u` is a `Wish(I, dof)` draw with the dof
/// of the returned data.
pub fn generate_data(u: &DMatrix<f64>, dof: usize, theta: &ThetaVector) -> Result<CrossProductData> {
    let m = theta.m();
    if u.nrows() != m || u.ncols() != m {
        return Err(Error::Dimension { expected: m, got: u.nrows() });
    }
    if Cholesky::new(u.clone()).is_none() {
        return Err(Error::NotPositiveDefinite("Wishart draw"));
    }
    let root = symmetric_sqrt(theta.sigma().matrix())?;
    let y = &root * u * &root;
    let y = (&y + y.transpose()) * 0.5;
    CrossProductData::new(y, dof)
}

/// Moment-based starting value for the MAP search.
///
/// `ψ₀` is half the first sample variance, all loadings start at 1 and each
/// unique variance is the remaining sample variance, floored at `1e-3`.
pub fn default_init(data: &CrossProductData) -> ThetaVector {
    let m = data.m();
    let nu = data.dof() as f64;
    let psi0 = 0.5 * data.y()[(0, 0)] / nu;
    let mut values = DVector::zeros(2 * m);
    values[0] = 0.5 * psi0.ln();
    for j in 1..m {
        values[j] = 1.0;
    }
    for j in 0..m {
        let residual = (data.y()[(j, j)] / nu - psi0).max(1e-3);
        values[m + j] = 0.5 * residual.ln();
    }
    ThetaVector(values)
}
