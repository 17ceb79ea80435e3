use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{initial_boundary_point, sprsa, CalibrationResult, CalibrationTarget, TuningConstants};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::rng::{stream, Purpose, StreamRng};
use crate::stats::quantile_thresholds;

/// Calibrated levels at a grid of thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub nominal_alphas: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub calibrated_alphas: Vec<f64>,
    pub mc_se: Vec<f64>,
    pub reliable: Vec<bool>,
}

impl CalibrationCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "nominal_alpha,xi,calibrated_alpha")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{}",
                fmt_f64(self.nominal_alphas[i]),
                fmt_f64(self.thresholds[i]),
                fmt_f64(self.calibrated_alphas[i])
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `ξ ↦ α*(ξ)` after an isotonic (nonincreasing) fit, interpolated
    /// linearly between nodes and held constant beyond them.
    pub fn interpolate(&self, xi: f64) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty("calibration curve"));
        }
        let mut nodes: Vec<(f64, f64)> =
            self.thresholds.iter().copied().zip(self.calibrated_alphas.iter().copied()).collect();
        nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
        // merge repeated thresholds
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut ws: Vec<f64> = Vec::new();
        for (x, y) in nodes {
            if xs.last() == Some(&x) {
                let i = xs.len() - 1;
                ys[i] = (ys[i] * ws[i] + y) / (ws[i] + 1.0);
                ws[i] += 1.0;
            } else {
                xs.push(x);
                ys.push(y);
                ws.push(1.0);
            }
        }
        let fitted = isotonic_nonincreasing(&ys, &ws);
        if xi <= xs[0] {
            return Ok(fitted[0]);
        }
        let last = xs.len() - 1;
        if xi >= xs[last] {
            return Ok(fitted[last]);
        }
        let i = xs.partition_point(|&x| x <= xi);
        let (x0, x1) = (xs[i - 1], xs[i]);
        let t = (xi - x0) / (x1 - x0);
        Ok(fitted[i - 1] + t * (fitted[i] - fitted[i - 1]))
    }
}

/// Weighted least-squares nonincreasing fit (pool adjacent violators).
pub fn isotonic_nonincreasing(y: &[f64], w: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &wt) in y.iter().zip(w) {
        blocks.push((v, wt, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            if blocks[n - 2].0 >= blocks[n - 1].0 {
                break;
            }
            let (m2, w2, c2) = blocks.pop().unwrap();
            let (m1, w1, c1) = blocks.pop().unwrap();
            blocks.push(((m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, c1 + c2));
        }
    }
    blocks.into_iter().flat_map(|(m, _, c)| std::iter::repeat(m).take(c)).collect()
}

/// Calibrates each threshold `ξ(α)`, the `(1 − α)` quantile of the observed
/// statistic over the posterior draws.
///
/// Threshold `i` starts from [`initial_boundary_point`] and uses the stream
/// `(seed, Curve, i, 0)`; thresholds run in parallel.
pub fn calibrate_curve<T: CalibrationTarget>(
    target: &T,
    draws: &[DVector<f64>],
    nominal_alphas: &[f64],
    tuning: &TuningConstants,
    seed: u64,
) -> Result<CalibrationCurve> {
    if nominal_alphas.is_empty() {
        return Err(Error::Empty("nominal alpha grid"));
    }
    let values = draws.iter().map(|d| target.observed_stat(d)).collect::<Result<Vec<f64>>>()?;
    let thresholds: Vec<f64> = quantile_thresholds(&values, nominal_alphas)?.into_iter().map(|t| t.xi()).collect();
    let results = thresholds
        .par_iter()
        .enumerate()
        .map(|(i, &xi)| {
            let init = initial_boundary_point(target, xi, draws)?;
            let mut rng = stream(seed, Purpose::Curve, i as u64, 0);
            sprsa(target, xi, &init, tuning, false, &mut rng)
        })
        .collect::<Result<Vec<CalibrationResult>>>()?;
    Ok(CalibrationCurve {
        nominal_alphas: nominal_alphas.to_vec(),
        thresholds,
        calibrated_alphas: results.iter().map(|r| r.alpha_hat_star).collect(),
        mc_se: results.iter().map(|r| r.mc_se).collect(),
        reliable: results.iter().map(|r| r.reliable).collect(),
    })
}

/// Calibrated possibility of `theta` read off the curve at `T(y, θ)`; the
/// MAP itself has possibility 1.
pub fn calibrated_possibility<T: CalibrationTarget>(
    target: &T,
    curve: &CalibrationCurve,
    theta: &DVector<f64>,
) -> Result<f64> {
    let stat = target.observed_stat(theta)?;
    if stat <= 0.0 {
        return Ok(1.0);
    }
    curve.interpolate(stat)
}

/// Calibrated possibility of `theta` from its own calibration run at
/// `ξ = T(y, θ)`, started at `theta` (which lies on that boundary).
pub fn calibrated_possibility_exact<T: CalibrationTarget>(
    target: &T,
    theta: &DVector<f64>,
    tuning: &TuningConstants,
    rng: &mut StreamRng,
) -> Result<CalibrationResult> {
    let xi = target.observed_stat(theta)?;
    if !(xi > 0.0) {
        return Err(Error::Degenerate("point is the MAP; its possibility is 1".into()));
    }
    sprsa(target, xi, theta, tuning, false, rng)
}
