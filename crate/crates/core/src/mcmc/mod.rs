//! Adaptive random-walk Metropolis with multi-chain diagnostics.
//!
//! Each chain runs three phases:
//!
//! 1. adaptation: Gaussian proposals `x + s·L·z`; the log scale `s` follows a
//!    Robbins–Monro recursion towards 23.4% acceptance and the shape `L` is
//!    refitted twice from the empirical covariance of recent states;
//! 2. burn-in with the kernel frozen;
//! 3. retention with the same frozen kernel, keeping every `thin`-th state.
//!
//! The kernel never changes after adaptation, so phases 2 and 3 are a
//! time-homogeneous Metropolis chain with the target as its invariant law.

pub mod diagnostics;

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::map::ridge_repair;
use crate::model::{CrossProductData, FactorModel, ThetaVector};
use crate::rng::{stream, Purpose, StreamRng};

pub use diagnostics::{ess, psrf};

const TARGET_ACCEPTANCE: f64 = 0.234;

/// Convergence screen: every coordinate needs PSRF ≤ 1.1 and ESS ≥ 100.
pub const PSRF_MAX: f64 = 1.1;
pub const ESS_MIN: f64 = 100.0;

/// Unnormalized log density; `-inf` outside the support.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &DVector<f64>) -> f64;
}

/// The factor-model posterior as a sampling target.
pub struct FactorPosterior<'a> {
    pub model: &'a FactorModel,
    pub data: &'a CrossProductData,
}

impl LogDensity for FactorPosterior<'_> {
    fn dim(&self) -> usize {
        2 * self.data.m()
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        ThetaVector::new(x.clone())
            .and_then(|t| self.model.log_posterior(self.data, &t))
            .unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub adapt_iters: usize,
    pub burnin_iters: usize,
    pub retain_iters: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { chains: 5, adapt_iters: 1000, burnin_iters: 10_000, retain_iters: 10_000, thin: 10, seed: 0 }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("chains", self.chains),
            ("adapt_iters", self.adapt_iters),
            ("burnin_iters", self.burnin_iters),
            ("retain_iters", self.retain_iters),
            ("thin", self.thin),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.retain_iters % self.thin != 0 {
            return Err(Error::InvalidConfig(format!(
                "retain_iters {} is not a multiple of thin {}",
                self.retain_iters, self.thin
            )));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> usize {
        self.retain_iters / self.thin
    }
}

/// Retained draws (chain-major) with per-coordinate diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub draws: Vec<DVector<f64>>,
    pub chains: usize,
    pub per_chain: usize,
    pub psrf: Vec<f64>,
    pub ess: Vec<f64>,
    /// Acceptance rate of each chain during retention.
    pub acceptance: Vec<f64>,
    pub converged: bool,
}

impl PosteriorDraws {
    /// Assembles draws and fills in the diagnostics.
    pub fn from_chains(chains: Vec<Vec<DVector<f64>>>, acceptance: Vec<f64>) -> Result<Self> {
        let n_chains = chains.len();
        let per_chain = chains.first().map_or(0, Vec::len);
        if per_chain == 0 || chains.iter().any(|c| c.len() != per_chain) {
            return Err(Error::Empty("retained draws"));
        }
        let dim = chains[0][0].len();
        let mut psrf_v = Vec::with_capacity(dim);
        let mut ess_v = Vec::with_capacity(dim);
        for p in 0..dim {
            let traces: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|d| d[p]).collect()).collect();
            let refs: Vec<&[f64]> = traces.iter().map(Vec::as_slice).collect();
            psrf_v.push(if n_chains >= 2 { psrf(&refs).unwrap_or(f64::INFINITY) } else { f64::NAN });
            // chain-wise ESS summed over chains
            ess_v.push(traces.iter().map(|t| ess(t).unwrap_or(0.0)).sum());
        }
        let converged = psrf_v.iter().all(|&r| r <= PSRF_MAX) && ess_v.iter().all(|&e| e >= ESS_MIN);
        Ok(Self {
            draws: chains.into_iter().flatten().collect(),
            chains: n_chains,
            per_chain,
            psrf: psrf_v,
            ess: ess_v,
            acceptance,
            converged,
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn chain_of(&self, i: usize) -> usize {
        i / self.per_chain
    }

    pub fn trace(&self, chain: usize, coord: usize) -> Vec<f64> {
        self.draws[chain * self.per_chain..(chain + 1) * self.per_chain].iter().map(|d| d[coord]).collect()
    }

    pub fn mean_acceptance(&self) -> f64 {
        self.acceptance.iter().sum::<f64>() / self.acceptance.len() as f64
    }

    pub fn thetas(&self) -> Result<Vec<ThetaVector>> {
        self.draws.iter().map(|d| ThetaVector::new(d.clone())).collect()
    }

    /// One row per draw: coordinates `theta_0..`, then `chain`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.draws.first().map_or(0, |d| d.len());
        let mut header: Vec<String> = (0..dim).map(|i| format!("theta_{i}")).collect();
        header.push("chain".into());
        writeln!(w, "{}", header.join(","))?;
        for (i, d) in self.draws.iter().enumerate() {
            let mut row: Vec<String> = d.iter().map(|&v| fmt_f64(v)).collect();
            row.push(self.chain_of(i).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn diagnostics(&self) -> Diagnostics {
        Diagnostics { psrf: self.psrf.clone(), ess: self.ess.clone(), converged: self.converged }
    }
}

/// `{psrf: [...], ess: [...], converged}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub psrf: Vec<f64>,
    pub ess: Vec<f64>,
    pub converged: bool,
}

/// The post-adaptation Metropolis kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenKernel {
    pub scale: f64,
    /// Lower Cholesky factor of the proposal shape.
    pub shape: DMatrix<f64>,
}

impl FrozenKernel {
    /// One Metropolis step; returns whether the proposal was accepted.
    pub fn step<T: LogDensity, R: Rng>(&self, target: &T, x: &mut DVector<f64>, lp: &mut f64, rng: &mut R) -> bool {
        metropolis_step(target, self.scale, &self.shape, x, lp, rng)
    }
}

fn metropolis_step<T: LogDensity, R: Rng>(
    target: &T,
    scale: f64,
    shape: &DMatrix<f64>,
    x: &mut DVector<f64>,
    lp: &mut f64,
    rng: &mut R,
) -> bool {
    let z = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let proposal = &*x + shape * z * scale;
    let lp_new = target.log_density(&proposal);
    let log_u: f64 = rng.random::<f64>().ln();
    if lp_new.is_finite() && log_u < lp_new - *lp {
        *x = proposal;
        *lp = lp_new;
        true
    } else {
        false
    }
}

/// A chain after adaptation: frozen kernel, current state and its stream.
#[derive(Debug, Clone)]
pub struct AdaptedChain {
    pub kernel: FrozenKernel,
    pub state: DVector<f64>,
    pub log_density: f64,
    rng: StreamRng,
}

#[derive(Default)]
struct Moments {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self { n: 0.0, mean: DVector::zeros(d), m2: DMatrix::zeros(d, d) }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1.0;
        let delta = x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.n > 1.0).then(|| &self.m2 / (self.n - 1.0))
    }
}

fn shape_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (repaired, _, _) = ridge_repair(cov)?;
    Ok(Cholesky::new(repaired).ok_or(Error::NotPositiveDefinite("proposal covariance"))?.l())
}

/// Runs the adaptation phase of one chain.
pub fn adapt_chain<T: LogDensity>(
    target: &T,
    adapt_iters: usize,
    init: DVector<f64>,
    proposal_cov: &DMatrix<f64>,
    chain: usize,
    mut rng: StreamRng,
) -> Result<AdaptedChain> {
    let d = target.dim();
    if init.len() != d {
        return Err(Error::Dimension { expected: d, got: init.len() });
    }
    let mut x = init;
    let mut lp = target.log_density(&x);
    if !lp.is_finite() {
        return Err(Error::InvalidInput(format!("chain {chain}: log density not finite at the initial value")));
    }
    let mut shape = shape_factor(proposal_cov)?;
    let mut log_scale = (2.38 / (d as f64).sqrt()).ln();
    let mut accepted = 0usize;
    let quarter = adapt_iters / 4;
    let mut window = Moments::new(d);

    for t in 1..=adapt_iters {
        let acc = metropolis_step(target, log_scale.exp(), &shape, &mut x, &mut lp, &mut rng);
        accepted += acc as usize;
        log_scale += ((acc as u8 as f64) - TARGET_ACCEPTANCE) / (t as f64).powf(0.6);
        log_scale = log_scale.clamp(-30.0, 5.0);

        if t > quarter {
            window.push(&x);
        }
        // refit the shape at the half and three-quarter marks
        if quarter >= 2 * d && (t == 2 * quarter || t == 3 * quarter) {
            if let Some(cov) = window.covariance() {
                if cov.diagonal().iter().all(|&v| v > 0.0) {
                    if let Ok(l) = shape_factor(&cov) {
                        shape = l;
                    }
                }
            }
            window = Moments::new(d);
        }
    }
    if accepted == 0 {
        return Err(Error::StepSizeUnderflow { chain });
    }
    Ok(AdaptedChain { kernel: FrozenKernel { scale: log_scale.exp(), shape }, state: x, log_density: lp, rng })
}

impl AdaptedChain {
    /// Burn-in then retention under the frozen kernel. Returns the retained
    /// states and the retention-phase acceptance rate.
    pub fn run<T: LogDensity>(mut self, target: &T, burnin: usize, retain: usize, thin: usize) -> (Vec<DVector<f64>>, f64) {
        for _ in 0..burnin {
            self.kernel.step(target, &mut self.state, &mut self.log_density, &mut self.rng);
        }
        let mut kept = Vec::with_capacity(retain / thin);
        let mut accepted = 0usize;
        for t in 1..=retain {
            accepted += self.kernel.step(target, &mut self.state, &mut self.log_density, &mut self.rng) as usize;
            if t % thin == 0 {
                kept.push(self.state.clone());
            }
        }
        (kept, accepted as f64 / retain as f64)
    }
}

/// Runs `config.chains` chains in parallel from the given starting values.
pub fn sample<T: LogDensity>(
    target: &T,
    config: &McmcConfig,
    inits: &[DVector<f64>],
    proposal_cov: &DMatrix<f64>,
) -> Result<PosteriorDraws> {
    config.validate()?;
    if inits.len() != config.chains {
        return Err(Error::Dimension { expected: config.chains, got: inits.len() });
    }
    let runs = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let rng = stream(config.seed, Purpose::Chain, c as u64, 1);
            let adapted = adapt_chain(target, config.adapt_iters, inits[c].clone(), proposal_cov, c, rng)?;
            Ok(adapted.run(target, config.burnin_iters, config.retain_iters, config.thin))
        })
        .collect::<Result<Vec<_>>>()?;
    let (chains, acceptance): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    PosteriorDraws::from_chains(chains, acceptance)
}

/// Samples the factor-model posterior.
///
/// Each chain starts at `init` plus independent `N(0, 0.1²)` jitter drawn from
/// its own stream. The initial proposal shape is the inverse negative
/// expected Hessian at `init`.
pub fn run_mcmc(
    model: &FactorModel,
    data: &CrossProductData,
    config: &McmcConfig,
    init: &ThetaVector,
) -> Result<PosteriorDraws> {
    let target = FactorPosterior { model, data };
    if !target.log_density(init.as_vector()).is_finite() {
        return Err(Error::InvalidInput("log posterior not evaluable at the initial value".into()));
    }
    let inits: Vec<DVector<f64>> = (0..config.chains)
        .map(|c| {
            let mut rng = stream(config.seed, Purpose::Chain, c as u64, 0);
            init.as_vector().map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let hess = model.expected_hessian_log_posterior(data, init)?;
    let (_, cov, _) = ridge_repair(&(-hess))?;
    sample(&target, config, &inits, &cov)
}
