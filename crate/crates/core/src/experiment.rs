//! Monte Carlo validity experiment.
//!
//! Each replication draws a true parameter from its scene, simulates data,
//! fits the MAP, samples the posterior and evaluates the original and the
//! calibrated possibility contour at the truth. Valid contours have
//! `P(contour ≤ α) ≤ α`; the EDF of the contour values is compared against
//! the diagonal with a normal-approximation Monte Carlo band.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::map::{find_map, MapOptions};
use crate::mcmc::{run_mcmc, McmcConfig, PosteriorDraws};
use crate::model::{default_init, generate_data, sample_standard_wishart, FactorModel, FactorModelConfig, ThetaVector};
use crate::rng::{derive_seed, stream, Purpose, StreamRng};
use crate::sprsa::{initial_boundary_point, sprsa, FactorTarget, TuningConstants};
use crate::stats::{Statistic, StatisticKind};

/// Parameter-generating scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scene {
    /// Communalities drawn independently from `U[.2, .8]` per replication.
    UniformCommunality,
    /// Every communality `.3`.
    FixedLow,
    /// Every communality `.7`.
    FixedHigh,
}

impl Scene {
    pub const ALL: [Scene; 3] = [Scene::UniformCommunality, Scene::FixedLow, Scene::FixedHigh];

    pub fn number(self) -> u8 {
        match self {
            Scene::UniformCommunality => 1,
            Scene::FixedLow => 2,
            Scene::FixedHigh => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scene::UniformCommunality => "uniform-communality",
            Scene::FixedLow => "fixed-low",
            Scene::FixedHigh => "fixed-high",
        }
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scene {
    type Err = Error;

    /// Accepts `1`-`3` or the kebab-case names.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Scene::ALL
            .into_iter()
            .find(|sc| s == sc.name() || s == sc.number().to_string() || s == format!("scene{}", sc.number()))
            .ok_or_else(|| Error::Parse(format!("unknown scene `{s}` (expected 1, 2, 3 or a scene name)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene: Scene,
    pub m: usize,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(scene: Scene, m: usize) -> Self {
        Self { scene, m, n: 100, replications: 512, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        FactorModelConfig::new(self.m, self.n)?;
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be positive".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> Result<FactorModelConfig> {
        FactorModelConfig::new(self.m, self.n)
    }
}

/// Communalities of the scene, then `ψ = h₁²`, `λ_j = √(h_j²/ψ)` and
/// `υ_j = 1 − h_j²`, so every response has unit variance.
pub fn generate_scene_theta(spec: &SceneSpec, rng: &mut StreamRng) -> Result<ThetaVector> {
    let h2: Vec<f64> = match spec.scene {
        Scene::UniformCommunality => (0..spec.m).map(|_| rng.random_range(0.2..=0.8)).collect(),
        Scene::FixedLow => vec![0.3; spec.m],
        Scene::FixedHigh => vec![0.7; spec.m],
    };
    let psi = h2[0];
    let lambda: Vec<f64> = h2.iter().map(|h| (h / psi).sqrt()).collect();
    let upsilon: Vec<f64> = h2.iter().map(|h| 1.0 - h).collect();
    ThetaVector::from_natural(psi, &lambda, &upsilon)
}

/// Share of posterior draws whose statistic is at least the statistic at
/// `theta`: the possibility contour of the nested credible regions.
pub fn original_contour(statistic: &Statistic<'_>, draws: &PosteriorDraws, theta: &ThetaVector) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Empty("posterior draws"));
    }
    let t = statistic.value(theta)?;
    let mut above = 0usize;
    for d in &draws.draws {
        if statistic.value_at(d)? >= t {
            above += 1;
        }
    }
    Ok(above as f64 / draws.len() as f64)
}

/// Contours of one statistic at the true parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourPair {
    pub kind: StatisticKind,
    /// `T(y, θ_true)`.
    pub xi: f64,
    pub original: f64,
    pub calibrated: Option<f64>,
    pub calibrated_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep_id: usize,
    pub theta_true: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub contours: Vec<ContourPair>,
    pub mcmc_converged: bool,
    pub flags: Vec<String>,
}

impl ReplicationRecord {
    pub fn contour(&self, kind: StatisticKind) -> Option<&ContourPair> {
        self.contours.iter().find(|c| c.kind == kind)
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: SceneSpec,
    pub kinds: Vec<StatisticKind>,
    pub tuning: TuningConstants,
    /// Its seed is replaced per replication.
    pub mcmc: McmcConfig,
    pub map: MapOptions,
    /// Skip the calibration runs (original contours only).
    pub calibrate: bool,
}

impl ExperimentConfig {
    pub fn new(spec: SceneSpec) -> Self {
        Self {
            spec,
            kinds: StatisticKind::ALL.to_vec(),
            tuning: TuningConstants::default(),
            mcmc: McmcConfig::default(),
            map: MapOptions::default(),
            calibrate: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.tuning.validate()?;
        self.mcmc.validate()?;
        if self.kinds.is_empty() {
            return Err(Error::InvalidConfig("no statistic selected".into()));
        }
        Ok(())
    }
}

/// One replication. Streams are keyed by `(spec.seed, ·, rep_id, ·)`.
pub fn run_replication(config: &ExperimentConfig, rep_id: usize) -> Result<ReplicationRecord> {
    let spec = &config.spec;
    let rep = rep_id as u64;
    let model = FactorModel::default();
    let theta_true = generate_scene_theta(spec, &mut stream(spec.seed, Purpose::SceneTheta, rep, 0))?;
    let dof = spec.config()?.dof();
    let u = sample_standard_wishart(spec.m, dof, &mut stream(spec.seed, Purpose::Data, rep, 0))?;
    let data = generate_data(&u, dof, &theta_true)?;

    let mut flags = Vec::new();
    let fit = find_map(&model, &data, &default_init(&data), &config.map)?;
    if !fit.converged {
        flags.push("map_not_converged".to_string());
    }
    let mcmc = McmcConfig { seed: derive_seed(spec.seed, Purpose::Mcmc, rep, 0), ..config.mcmc };
    let draws = run_mcmc(&model, &data, &mcmc, &default_init(&data))?;
    if !draws.converged {
        flags.push("mcmc_not_converged".to_string());
    }

    let mut contours = Vec::with_capacity(config.kinds.len());
    for &kind in &config.kinds {
        let statistic = Statistic::new(kind, &model, &data, &fit);
        let xi = statistic.value(&theta_true)?;
        let original = original_contour(&statistic, &draws, &theta_true)?;
        let (mut calibrated, mut calibrated_se) = (None, None);
        if config.calibrate {
            let target = FactorTarget { statistic, options: config.map };
            let sub = StatisticKind::ALL.iter().position(|k| *k == kind).unwrap_or(0) as u64;
            let mut rng = stream(spec.seed, Purpose::Sprsa, rep, sub);
            let run = initial_boundary_point(&target, xi, &draws.draws)
                .and_then(|init| sprsa(&target, xi, &init, &config.tuning, false, &mut rng));
            match run {
                Ok(r) => {
                    if !r.reliable {
                        flags.push(format!("calibration_unreliable_{kind}"));
                    }
                    calibrated = Some(r.alpha_hat_star);
                    calibrated_se = Some(r.mc_se);
                }
                Err(e) => flags.push(format!("calibration_failed_{kind}: {e}")),
            }
        }
        contours.push(ContourPair { kind, xi, original, calibrated, calibrated_se });
    }

    Ok(ReplicationRecord {
        rep_id,
        theta_true: theta_true.as_slice().to_vec(),
        theta_hat: fit.theta_hat.as_slice().to_vec(),
        contours,
        mcmc_converged: draws.converged,
        flags,
    })
}

/// All replications, in parallel; the result is in `rep_id` order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ReplicationRecord>> {
    config.validate()?;
    (0..config.spec.replications).into_par_iter().map(|r| run_replication(config, r)).collect()
}

/// EDFs of the contour values against the Monte Carlo band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdfSummary {
    pub kind: StatisticKind,
    pub alphas: Vec<f64>,
    /// Number of records used.
    pub records: usize,
    pub edf_original: Vec<f64>,
    /// Empty when no calibrated contours are available.
    pub edf_calibrated: Vec<f64>,
    pub band_lo: Vec<f64>,
    pub band_hi: Vec<f64>,
}

impl EdfSummary {
    /// Grid points where the calibrated EDF is above the band.
    pub fn calibrated_violations(&self) -> Vec<f64> {
        violations(&self.alphas, &self.edf_calibrated, &self.band_hi)
    }

    pub fn original_violations(&self) -> Vec<f64> {
        violations(&self.alphas, &self.edf_original, &self.band_hi)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "alpha,edf_original,edf_calibrated,band_lo,band_hi")?;
        for i in 0..self.alphas.len() {
            let cal = self.edf_calibrated.get(i).map_or(String::new(), |&v| fmt_f64(v));
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(self.alphas[i]),
                fmt_f64(self.edf_original[i]),
                cal,
                fmt_f64(self.band_lo[i]),
                fmt_f64(self.band_hi[i])
            )?;
        }
        Ok(())
    }
}

fn violations(alphas: &[f64], edf: &[f64], hi: &[f64]) -> Vec<f64> {
    edf.iter().zip(hi).zip(alphas).filter(|((e, h), _)| e > h).map(|(_, &a)| a).collect()
}

/// `α ± 1.96 √(α(1 − α)/R)`.
pub fn mc_band(alpha: f64, records: usize) -> (f64, f64) {
    let half = 1.96 * (alpha * (1.0 - alpha) / records as f64).sqrt();
    (alpha - half, alpha + half)
}

fn edf(values: &[f64], alpha: f64) -> f64 {
    values.iter().filter(|&&v| v <= alpha).count() as f64 / values.len() as f64
}

/// EDFs at `alphas`. Flagged records are left out unless `include_flagged`.
pub fn edf_summary(
    records: &[ReplicationRecord],
    kind: StatisticKind,
    alphas: &[f64],
    include_flagged: bool,
) -> Result<EdfSummary> {
    let used: Vec<&ContourPair> = records
        .iter()
        .filter(|r| include_flagged || !r.is_flagged())
        .filter_map(|r| r.contour(kind))
        .collect();
    if used.is_empty() {
        return Err(Error::Empty("unflagged replication records"));
    }
    let original: Vec<f64> = used.iter().map(|c| c.original).collect();
    let calibrated: Vec<f64> = used.iter().filter_map(|c| c.calibrated).collect();
    let r = used.len();
    let (band_lo, band_hi) = alphas.iter().map(|&a| mc_band(a, r)).unzip();
    Ok(EdfSummary {
        kind,
        alphas: alphas.to_vec(),
        records: r,
        edf_original: alphas.iter().map(|&a| edf(&original, a)).collect(),
        edf_calibrated: if calibrated.len() == r {
            alphas.iter().map(|&a| edf(&calibrated, a)).collect()
        } else {
            Vec::new()
        },
        band_lo,
        band_hi,
    })
}

/// `.05, .10, …, .95`.
pub fn default_alpha_grid() -> Vec<f64> {
    crate::stats::nominal_alpha_grid(19)
}

/// One row per record.
pub fn write_records_csv<W: Write>(records: &[ReplicationRecord], kinds: &[StatisticKind], mut w: W) -> Result<()> {
    let q = records.first().map_or(0, |r| r.theta_true.len());
    let mut header = vec!["rep_id".to_string()];
    header.extend((0..q).map(|i| format!("theta_true_{i}")));
    for k in kinds {
        for col in ["xi", "original", "calibrated", "calibrated_se"] {
            header.push(format!("{k}_{col}"));
        }
    }
    header.push("mcmc_converged".into());
    header.push("flags".into());
    writeln!(w, "{}", header.join(","))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), fmt_f64);
    for r in records {
        let mut row = vec![r.rep_id.to_string()];
        row.extend(r.theta_true.iter().map(|&v| fmt_f64(v)));
        for &k in kinds {
            match r.contour(k) {
                Some(c) => {
                    row.push(fmt_f64(c.xi));
                    row.push(fmt_f64(c.original));
                    row.push(opt(c.calibrated));
                    row.push(opt(c.calibrated_se));
                }
                None => row.extend(std::iter::repeat(String::new()).take(4)),
            }
        }
        row.push(r.mcmc_converged.to_string());
        // flags may contain commas in error messages
        row.push(r.flags.join(";").replace(',', " "));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes `records.csv` and one `edf_<kind>.csv` per statistic into `dir`.
pub fn write_results(
    dir: &Path,
    records: &[ReplicationRecord],
    summaries: &[EdfSummary],
    kinds: &[StatisticKind],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("records.csv"))?);
    write_records_csv(records, kinds, &mut f)?;
    f.flush()?;
    for s in summaries {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("edf_{}.csv", s.kind)))?);
        s.write_csv(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

/// Communalities `h_j² = 1 − υ_j`.
pub fn communalities(theta: &ThetaVector) -> DVector<f64> {
    theta.upsilon().map(|u| 1.0 - u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sigma_of_theta;

    fn quick_config(scene: Scene, reps: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(SceneSpec { scene, m: 5, n: 100, replications: reps, seed: 11 });
        c.tuning = c.tuning.with_iterations(200);
        c.mcmc = McmcConfig { chains: 3, adapt_iters: 400, burnin_iters: 400, retain_iters: 600, thin: 2, seed: 0 };
        c
    }

    #[test]
    fn fixed_scenes() {
        let mut rng = stream(0, Purpose::SceneTheta, 0, 0);
        let high = generate_scene_theta(&SceneSpec::new(Scene::FixedHigh, 5), &mut rng).unwrap();
        assert!((high.zeta() - 0.7f64.ln() / 2.0).abs() < 1e-15);
        for j in 0..5 {
            assert!((high.omega(j) - 0.3f64.ln() / 2.0).abs() < 1e-15);
        }
        assert!(high.lambda().iter().all(|&l| (l - 1.0).abs() < 1e-15));
        let low = generate_scene_theta(&SceneSpec::new(Scene::FixedLow, 5), &mut rng).unwrap();
        assert!((low.psi() - 0.3).abs() < 1e-15);
        assert!(low.upsilon().iter().all(|&u| (u - 0.7).abs() < 1e-15));
    }

    #[test]
    fn unit_marginal_variances() {
        for scene in Scene::ALL {
            let spec = SceneSpec::new(scene, 6);
            for r in 0..20 {
                let t = generate_scene_theta(&spec, &mut stream(5, Purpose::SceneTheta, r, 0)).unwrap();
                let s = sigma_of_theta(&t, &spec.config().unwrap()).unwrap();
                for j in 0..6 {
                    assert!((s.matrix()[(j, j)] - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scene_parsing() {
        assert_eq!("2".parse::<Scene>().unwrap(), Scene::FixedLow);
        assert_eq!("fixed-high".parse::<Scene>().unwrap(), Scene::FixedHigh);
        assert_eq!("Scene1".parse::<Scene>().unwrap(), Scene::UniformCommunality);
        assert!("4".parse::<Scene>().is_err());
    }

    #[test]
    fn band_half_width() {
        let (lo, hi) = mc_band(0.5, 512);
        assert!(((hi - lo) / 2.0 - 0.0433).abs() < 5e-5);
    }

    fn record(original: f64, calibrated: f64, flags: Vec<String>) -> ReplicationRecord {
        ReplicationRecord {
            rep_id: 0,
            theta_true: vec![],
            theta_hat: vec![],
            contours: vec![ContourPair {
                kind: StatisticKind::Wald,
                xi: 1.0,
                original,
                calibrated: Some(calibrated),
                calibrated_se: Some(0.0),
            }],
            mcmc_converged: flags.is_empty(),
            flags,
        }
    }

    #[test]
    fn edf_edge_cases() {
        let recs: Vec<_> = (0..10).map(|_| record(1.0, 1.0, vec![])).collect();
        let grid = default_alpha_grid();
        let s = edf_summary(&recs, StatisticKind::Wald, &grid, false).unwrap();
        assert!(s.edf_original.iter().all(|&e| e == 0.0));
        let s = edf_summary(&recs, StatisticKind::Wald, &[1.0], false).unwrap();
        assert_eq!(s.edf_original, vec![1.0]);
        let flagged = vec![record(0.1, 0.1, vec!["mcmc_not_converged".into()])];
        assert!(edf_summary(&flagged, StatisticKind::Wald, &grid, false).is_err());
        assert_eq!(edf_summary(&flagged, StatisticKind::Wald, &grid, true).unwrap().records, 1);
    }

    #[test]
    fn replication_is_deterministic() {
        let c = quick_config(Scene::FixedHigh, 1);
        let a = run_replication(&c, 3).unwrap();
        let b = run_replication(&c, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.contours.len(), 2);
        for p in &a.contours {
            assert!((0.0..=1.0).contains(&p.original));
            assert!((0.0..=1.0).contains(&p.calibrated.unwrap()));
        }
    }

    #[test]
    fn fixed_scenes_share_truth() {
        let mut c = quick_config(Scene::FixedLow, 2);
        c.calibrate = false;
        let recs = run_experiment(&c).unwrap();
        assert_eq!(recs[0].theta_true, recs[1].theta_true);
        assert_ne!(recs[0].theta_hat, recs[1].theta_hat);
        let mut c = quick_config(Scene::UniformCommunality, 2);
        c.calibrate = false;
        let recs = run_experiment(&c).unwrap();
        assert_ne!(recs[0].theta_true, recs[1].theta_true);
    }

    #[test]
    fn contour_at_map_is_one() {
        let c = quick_config(Scene::FixedHigh, 1);
        let spec = c.spec;
        let theta = generate_scene_theta(&spec, &mut stream(1, Purpose::SceneTheta, 0, 0)).unwrap();
        let u = sample_standard_wishart(5, 99, &mut stream(1, Purpose::Data, 0, 0)).unwrap();
        let data = generate_data(&u, 99, &theta).unwrap();
        let model = FactorModel::default();
        let fit = find_map(&model, &data, &default_init(&data), &MapOptions::default()).unwrap();
        let draws = run_mcmc(&model, &data, &McmcConfig { seed: 2, ..c.mcmc }, &fit.theta_hat).unwrap();
        for kind in StatisticKind::ALL {
            let s = Statistic::new(kind, &model, &data, &fit);
            assert_eq!(original_contour(&s, &draws, &fit.theta_hat).unwrap(), 1.0);
            let far = ThetaVector::new(fit.theta_hat.as_vector().map(|v| v + 3.0)).unwrap();
            assert_eq!(original_contour(&s, &draws, &far).unwrap(), 0.0);
        }
    }
}
