//! Convergence diagnostics: split-chain PSRF and Geyer ESS.

use crate::error::{Error, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Potential scale reduction factor on chains split in halves.
///
/// Each chain is cut into its first and second half (the middle draw of an
/// odd-length chain is dropped), then the classic Gelman–Rubin ratio
/// `sqrt(((n−1)/n · W + B/n) / W)` is taken over the `2M` half-chains.
/// Returns infinity when every half-chain is constant but their means differ.
pub fn psrf(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::InvalidInput("PSRF needs at least two chains".into()));
    }
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let half = len / 2;
    if half < 2 {
        return Err(Error::InvalidInput("chains too short for split PSRF".into()));
    }
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..len];
        halves.push(&c[..half]);
        halves.push(&c[len - half..]);
    }
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = halves.iter().map(|h| sample_variance(h)).sum::<f64>() / halves.len() as f64;
    let b_over_n = sample_variance(&means);
    if w == 0.0 {
        return if b_over_n == 0.0 {
            Err(Error::ConstantTrace)
        } else {
            Ok(f64::INFINITY)
        };
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    Ok((var_plus / w).sqrt())
}

/// Effective sample size by Geyer's initial positive sequence.
///
/// With autocorrelations `ρ_t`, pairs `Γ_k = ρ_{2k} + ρ_{2k+1}` are summed
/// while positive and `ESS = n / (−1 + 2 Σ Γ_k)`.
pub fn ess(trace: &[f64]) -> Result<f64> {
    let n = trace.len();
    if n < 4 {
        return Err(Error::InvalidInput("trace too short for ESS".into()));
    }
    let m = mean(trace);
    let centered: Vec<f64> = trace.iter().map(|v| v - m).collect();
    let c0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return Err(Error::ConstantTrace);
    }
    let rho = |lag: usize| -> f64 {
        let s: f64 = centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum();
        s / n as f64 / c0
    };
    let mut sum = 0.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let gamma = rho(2 * k) + rho(2 * k + 1);
        if gamma <= 0.0 {
            break;
        }
        sum += gamma;
        k += 1;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / n as f64);
    Ok(n as f64 / tau)
}
