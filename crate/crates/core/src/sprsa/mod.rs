//! Threshold calibration by stochastic approximation on the region boundary.
//!
//! For a threshold `ξ` the credible region `{θ : T(y, θ) ≤ ξ}` has boundary
//! `{T(y, θ) = ξ}`. The calibrated level is the largest p-value
//! `P_θ{T(Y, θ) ≥ T(y, θ)}` over that boundary. [`sprsa`] climbs the p-value
//! along the boundary with simultaneous-perturbation gradient estimates,
//! projects them onto the tangent space, retracts back along rays from the
//! MAP and averages the indicators it evaluates along the way.

mod curve;
mod factor;
pub mod toy;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub use curve::{
    calibrate_curve, calibrated_possibility, calibrated_possibility_exact, isotonic_nonincreasing, CalibrationCurve,
};
pub use factor::FactorTarget;

/// Residual accepted by the root finder, `|T − ξ|`.
pub const RETRACT_TOL: f64 = 1e-8;
/// Share of skipped iterations above which a run is flagged unreliable.
pub const SKIP_BUDGET: f64 = 0.05;

const MAX_BISECTIONS: usize = 200;
const MAX_BRACKET_STEPS: usize = 60;
const MAX_STEP_HALVINGS: usize = 40;

/// Everything the calibration loop needs from a model and its observed data.
pub trait CalibrationTarget: Sync {
    /// Randomness of one simulated dataset, shared by both perturbed points.
    type Noise;

    fn dim(&self) -> usize;

    /// The MAP of the observed data; rays are anchored here.
    fn center(&self) -> &DVector<f64>;

    /// `T(y, θ)` for the observed data.
    fn observed_stat(&self, theta: &DVector<f64>) -> Result<f64>;

    fn observed_stat_gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// True when `T(y, center + x·d) = x² T(y, center + d)`, which gives the
    /// retraction in closed form.
    fn quadratic_along_rays(&self) -> bool {
        false
    }

    fn draw_noise(&self, rng: &mut StreamRng) -> Self::Noise;

    /// `T(g(u, θ), θ)` for data simulated at `θ`, or `None` when the inner
    /// fit failed.
    fn simulated_stat(&self, noise: &Self::Noise, theta: &DVector<f64>) -> Result<Option<f64>>;

    /// One indicator `1{T(g(u, θ), θ) ≥ T(y, θ)}`.
    fn indicator(&self, noise: &Self::Noise, theta: &DVector<f64>) -> Result<Option<bool>> {
        let observed = self.observed_stat(theta)?;
        Ok(self.simulated_stat(noise, theta)?.map(|s| s >= observed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningConstants {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub iterations: usize,
    /// Leading iterations left out of the average.
    #[serde(default)]
    pub burn_in: usize,
}

impl Default for TuningConstants {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.65, gamma: 0.05, delta: 0.149, iterations: 50_000, burn_in: 0 }
    }
}

impl TuningConstants {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64, iterations: usize) -> Result<Self> {
        let t = Self { alpha, beta, gamma, delta, iterations, burn_in: 0 };
        t.validate()?;
        Ok(t)
    }

    /// Zero learning rate: the iterate never moves and the average is a plain
    /// Monte Carlo p-value at the start point.
    pub fn frozen(gamma: f64, delta: f64, iterations: usize) -> Self {
        Self { alpha: 0.0, beta: 1.0, gamma, delta, iterations, burn_in: 0 }
    }

    pub fn with_iterations(self, iterations: usize) -> Self {
        Self { iterations, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.alpha > 0.0 || (self.alpha == 0.0 && self.beta == 1.0)) {
            return bad(format!("learning-rate scale {} must be positive", self.alpha));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("perturbation scale {} must be positive", self.gamma));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return bad(format!("perturbation decay {} must lie in (0, 0.5)", self.delta));
        }
        if !(self.beta > self.delta + 0.5 && self.beta <= 1.0) {
            return bad(format!("learning-rate decay {} must lie in ({}, 1]", self.beta, self.delta + 0.5));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.burn_in >= self.iterations {
            return bad(format!("burn-in {} leaves no iterations to average", self.burn_in));
        }
        Ok(())
    }

    /// `Σ a_k²/c_k² < ∞` holds exactly when `2(β − δ) > 1`.
    pub fn square_summable(&self) -> bool {
        2.0 * (self.beta - self.delta) > 1.0
    }
}

/// `(a_k, c_k) = (α/k^β, γ/k^δ)` for `k ≥ 1`.
pub fn rates(k: usize, tuning: &TuningConstants) -> (f64, f64) {
    assert!(k >= 1, "iterations are numbered from 1");
    let k = k as f64;
    (tuning.alpha / k.powf(tuning.beta), tuning.gamma / k.powf(tuning.delta))
}

/// `[I − ∇T ∇Tᵀ / ∇Tᵀ∇T] v`.
pub fn project_tangent(v: &DVector<f64>, grad_t: &DVector<f64>) -> DVector<f64> {
    let nn = grad_t.norm_squared();
    v - grad_t * (grad_t.dot(v) / nn)
}

/// The projector as a matrix.
pub fn tangent_projector(grad_t: &DVector<f64>) -> DMatrix<f64> {
    let n = grad_t.len();
    DMatrix::identity(n, n) - grad_t * grad_t.transpose() / grad_t.norm_squared()
}

/// Ambient SP estimate at `θ` together with the indicator pair
/// `(I(θ + cΔ), I(θ − cΔ))` and `ΣΔ_r`. `None` if either inner fit failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpEstimate {
    pub ambient: DVector<f64>,
    pub pair: (bool, bool),
    pub delta_sum: i64,
}

/// One simultaneous-perturbation estimate: draws the noise, then the
/// Rademacher vector, and evaluates both perturbed indicators with the same
/// noise.
pub fn sp_gradient<T: CalibrationTarget>(
    target: &T,
    theta: &DVector<f64>,
    c: f64,
    rng: &mut StreamRng,
) -> Result<Option<SpEstimate>> {
    let noise = target.draw_noise(rng);
    let delta = DVector::from_fn(theta.len(), |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    let plus = theta + &delta * c;
    let minus = theta - &delta * c;
    let (Some(ip), Some(im)) = (target.indicator(&noise, &plus)?, target.indicator(&noise, &minus)?) else {
        return Ok(None);
    };
    let diff = (ip as u8 as f64 - im as u8 as f64) / (2.0 * c);
    Ok(Some(SpEstimate {
        ambient: &delta * diff,
        pair: (ip, im),
        delta_sum: delta.iter().map(|&d| d as i64).sum(),
    }))
}

/// Riemannian SP gradient: the ambient estimate projected onto the tangent
/// space of the boundary at `θ`.
pub fn riem_grad_fd<T: CalibrationTarget>(
    target: &T,
    theta: &DVector<f64>,
    c: f64,
    rng: &mut StreamRng,
) -> Result<Option<(DVector<f64>, (bool, bool))>> {
    let grad_t = regular_gradient(target, theta)?;
    Ok(sp_gradient(target, theta, c, rng)?.map(|e| (project_tangent(&e.ambient, &grad_t), e.pair)))
}

fn regular_gradient<T: CalibrationTarget>(target: &T, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let g = target.observed_stat_gradient(theta)?;
    let norm = g.norm();
    if !(norm >= crate::stats::ZERO_GRADIENT_TOL) {
        return Err(Error::NonRegularPoint { norm });
    }
    Ok(g)
}

/// Moves `θ + h` back onto `{T = ξ}` along the ray from the MAP through it.
pub fn retract<T: CalibrationTarget>(target: &T, theta: &DVector<f64>, h: &DVector<f64>, xi: f64) -> Result<DVector<f64>> {
    if !target.quadratic_along_rays() {
        return retract_by_root(target, theta, h, xi);
    }
    let center = target.center();
    let dir = theta + h - center;
    let t = target.observed_stat(&(center + &dir))?;
    if !(t > 0.0) || dir.norm() == 0.0 {
        return Err(Error::Degenerate("retraction ray starts at the MAP".into()));
    }
    Ok(center + dir * (xi / t).sqrt())
}

/// The retraction by bracketing and bisection on `x ↦ T(center + x·d) − ξ`,
/// whatever the shape of the statistic.
///
/// The bracket is grown from `x = 1` (doubling or halving), so the root found
/// is the one adjacent to the unretracted point.
pub fn retract_by_root<T: CalibrationTarget>(
    target: &T,
    theta: &DVector<f64>,
    h: &DVector<f64>,
    xi: f64,
) -> Result<DVector<f64>> {
    let center = target.center();
    let dir = theta + h - center;
    if dir.norm() == 0.0 {
        return Err(Error::Degenerate("retraction ray starts at the MAP".into()));
    }
    let f = |x: f64| -> Result<f64> { Ok(target.observed_stat(&(center + &dir * x))? - xi) };
    let escape = || Error::RayEscape { xi };

    let f1 = f(1.0).map_err(|_| escape())?;
    if f1.abs() <= RETRACT_TOL * 1e-2 {
        return Ok(center + dir);
    }
    let (mut lo, mut hi) = (1.0, 1.0);
    if f1 < 0.0 {
        let mut found = false;
        for _ in 0..MAX_BRACKET_STEPS {
            lo = hi;
            hi *= 2.0;
            match f(hi) {
                Ok(v) if v >= 0.0 => {
                    found = true;
                    break;
                }
                Ok(v) if v.is_finite() => {}
                _ => return Err(escape()),
            }
        }
        if !found {
            return Err(escape());
        }
    } else {
        let mut found = false;
        for _ in 0..MAX_BRACKET_STEPS {
            hi = lo;
            lo *= 0.5;
            if f(lo)? < 0.0 {
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Degenerate("statistic does not fall below the threshold near the MAP".into()));
        }
    }

    // f(lo) < 0 ≤ f(hi)
    let mut best = (f64::INFINITY, hi);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let v = f(mid)?;
        if v.abs() < best.0 {
            best = (v.abs(), mid);
        }
        if v.abs() <= RETRACT_TOL * 1e-2 || mid == lo || mid == hi {
            break;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > RETRACT_TOL {
        return Err(Error::Degenerate(format!("retraction residual {:e} above tolerance", best.0)));
    }
    Ok(center + dir * best.1)
}

/// One SPRSA iteration, kept when tracing is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub k: usize,
    pub a: f64,
    pub c: f64,
    /// `None` when the iteration was skipped.
    pub pair: Option<(bool, bool)>,
    pub delta_sum: i64,
    pub step_norm: f64,
    /// `T(y, θ)` after the update.
    pub stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub xi: f64,
    pub alpha_hat_star: f64,
    /// Batch-means standard error of the average.
    pub mc_se: f64,
    pub theta_final: Vec<f64>,
    pub iterations: usize,
    pub skipped: usize,
    pub reliable: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<TraceEntry>>,
}

impl CalibrationResult {
    /// Recomputes the average from the stored indicator pairs.
    pub fn alpha_from_trace(&self, burn_in: usize) -> Option<f64> {
        let trace = self.trace.as_ref()?;
        let (sum, n) = trace
            .iter()
            .filter(|e| e.k > burn_in)
            .filter_map(|e| e.pair)
            .fold((0.0, 0usize), |(s, n), (p, m)| (s + (p as u8 + m as u8) as f64 / 2.0, n + 1));
        Some(sum / n as f64)
    }

    /// Writes the trace as CSV; empty body if no trace was kept.
    pub fn write_trace_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        use crate::io::fmt_f64;
        writeln!(w, "k,a,c,indicator_plus,indicator_minus,skipped,step_norm,stat")?;
        for e in self.trace.iter().flatten() {
            let (p, m, s) = match e.pair {
                Some((p, m)) => ((p as u8).to_string(), (m as u8).to_string(), "0"),
                None => (String::new(), String::new(), "1"),
            };
            writeln!(
                w,
                "{},{},{},{p},{m},{s},{},{}",
                e.k,
                fmt_f64(e.a),
                fmt_f64(e.c),
                fmt_f64(e.step_norm),
                fmt_f64(e.stat)
            )?;
        }
        Ok(())
    }
}

/// Runs the calibration loop at threshold `xi` from `theta_init`.
///
/// `theta_init` is first retracted onto the boundary. Each iteration draws a
/// gradient estimate with [`riem_grad_fd`] and moves to
/// `retract(θ, a_k g)`; when the ray from the MAP misses the boundary the step
/// is halved. Iterations whose inner fits fail leave `θ` in place and are
/// left out of the average.
pub fn sprsa<T: CalibrationTarget>(
    target: &T,
    xi: f64,
    theta_init: &DVector<f64>,
    tuning: &TuningConstants,
    keep_trace: bool,
    rng: &mut StreamRng,
) -> Result<CalibrationResult> {
    tuning.validate()?;
    if !(xi > 0.0) {
        return Err(Error::InvalidInput(format!("threshold {xi} must be positive")));
    }
    if theta_init.len() != target.dim() {
        return Err(Error::Dimension { expected: target.dim(), got: theta_init.len() });
    }
    if theta_init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite starting value".into()));
    }
    let zero = DVector::zeros(target.dim());
    let mut theta = retract(target, theta_init, &zero, xi)?;

    let mut trace = keep_trace.then(|| Vec::with_capacity(tuning.iterations));
    let mut z = Vec::with_capacity(tuning.iterations);
    let mut skipped = 0usize;

    for k in 1..=tuning.iterations {
        let (a, c) = rates(k, tuning);
        let grad_t = regular_gradient(target, &theta)?;
        let estimate = sp_gradient(target, &theta, c, rng)?;
        let mut step_norm = 0.0;
        let mut delta_sum = 0;
        let pair = match estimate {
            None => {
                skipped += 1;
                None
            }
            Some(e) => {
                delta_sum = e.delta_sum;
                if k > tuning.burn_in {
                    z.push((e.pair.0 as u8 + e.pair.1 as u8) as f64 / 2.0);
                }
                let mut h = project_tangent(&e.ambient, &grad_t) * a;
                if h.norm() > 0.0 {
                    let mut moved = None;
                    for _ in 0..MAX_STEP_HALVINGS {
                        match retract(target, &theta, &h, xi) {
                            Ok(next) => {
                                moved = Some(next);
                                break;
                            }
                            Err(Error::RayEscape { .. }) => h *= 0.5,
                            Err(e) => return Err(e),
                        }
                    }
                    if let Some(next) = moved {
                        step_norm = (&next - &theta).norm();
                        theta = next;
                    }
                }
                Some(e.pair)
            }
        };
        if let Some(t) = trace.as_mut() {
            t.push(TraceEntry { k, a, c, pair, delta_sum, step_norm, stat: target.observed_stat(&theta)? });
        }
    }

    if z.is_empty() {
        return Err(Error::Degenerate("every calibration iteration was skipped".into()));
    }
    Ok(CalibrationResult {
        xi,
        alpha_hat_star: z.iter().sum::<f64>() / z.len() as f64,
        mc_se: batch_means_se(&z),
        theta_final: theta.iter().copied().collect(),
        iterations: tuning.iterations,
        skipped,
        reliable: (skipped as f64) <= SKIP_BUDGET * tuning.iterations as f64,
        trace,
    })
}

/// Standard error of the mean of a serially dependent series by
/// non-overlapping batch means, `⌊√n⌋` batches. Falls back to the i.i.d.
/// formula for short series.
pub fn batch_means_se(z: &[f64]) -> f64 {
    let n = z.len();
    let mean = z.iter().sum::<f64>() / n as f64;
    let batches = (n as f64).sqrt() as usize;
    if batches < 10 {
        if n < 2 {
            return 0.0;
        }
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        return (var / n as f64).sqrt();
    }
    let size = n / batches;
    let means: Vec<f64> = z.chunks_exact(size).take(batches).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Starting point on the boundary: the draw whose statistic is closest to
/// `xi`, retracted onto `{T = ξ}`. Draws at the MAP or whose ray misses the
/// boundary are passed over in order of closeness.
pub fn initial_boundary_point<T: CalibrationTarget>(target: &T, xi: f64, draws: &[DVector<f64>]) -> Result<DVector<f64>> {
    if draws.is_empty() {
        return Err(Error::Empty("posterior draws"));
    }
    let mut scored = draws
        .iter()
        .enumerate()
        .map(|(i, d)| Ok(((target.observed_stat(d)? - xi).abs(), i)))
        .collect::<Result<Vec<(f64, usize)>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let zero = DVector::zeros(target.dim());
    for (_, i) in scored {
        match retract(target, &draws[i], &zero, xi) {
            Ok(p) => return Ok(p),
            Err(Error::Degenerate(_) | Error::RayEscape { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Degenerate("no posterior draw leads to the boundary".into()))
}
