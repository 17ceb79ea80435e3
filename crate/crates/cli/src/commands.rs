use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use calibayes::experiment::{
    default_alpha_grid, edf_summary, generate_scene_theta, run_experiment, write_results, ExperimentConfig, SceneSpec,
};
use calibayes::io::fmt_f64;
use calibayes::map::{find_map, MapFit, MapOptions};
use calibayes::mcmc::run_mcmc;
use calibayes::model::{default_init, generate_data, sample_standard_wishart, CrossProductData, FactorModel};
use calibayes::rng::{derive_seed, stream, Purpose};
use calibayes::sprsa::{calibrate_curve, FactorTarget};
use calibayes::stats::{nominal_alpha_grid, StatisticKind};
use calibayes::{Error, Result};

use crate::manifest::RunManifest;
use crate::{CalibrateArgs, ExperimentArgs, Format, MapArgs, McmcArgs, ReplayArgs, SimulateArgs};

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn fit_map(data: &CrossProductData, options: &MapOptions) -> Result<MapFit> {
    let fit = find_map(&FactorModel::default(), data, &default_init(data), options)?;
    if !fit.converged {
        eprintln!("warning: MAP search stopped at gradient norm {:e} after {} iterations", fit.grad_norm, fit.iterations);
    }
    if fit.ridge_repaired() {
        eprintln!("warning: expected information needed a ridge of {:e}", fit.ridge);
    }
    Ok(fit)
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let spec = SceneSpec { scene: args.scene, m: args.m, n: args.n, replications: args.reps, seed: args.seed };
    spec.validate()?;
    let dof = spec.config()?.dof();
    let data_dir = args.out.join("data");
    fs::create_dir_all(&data_dir)?;

    let mut thetas = Vec::with_capacity(args.reps);
    for rep in 0..args.reps {
        let r = rep as u64;
        let theta = generate_scene_theta(&spec, &mut stream(spec.seed, Purpose::SceneTheta, r, 0))?;
        let u = sample_standard_wishart(spec.m, dof, &mut stream(spec.seed, Purpose::Data, r, 0))?;
        let data = generate_data(&u, dof, &theta)?;
        let path = data_dir.join(format!("rep_{rep:04}.{}", args.format.ext()));
        match args.format {
            Format::Csv => {
                let mut f = create(&path)?;
                data.write_csv(&mut f)?;
                f.flush()?;
            }
            Format::Json => fs::write(&path, data.to_json()? + "\n")?,
        }
        thetas.push(theta);
    }

    let mut f = create(&args.out.join("theta_true.csv"))?;
    let q = 2 * spec.m;
    let header: Vec<String> = (0..q).map(|i| format!("theta_{i}")).collect();
    writeln!(f, "rep_id,{}", header.join(","))?;
    for (rep, t) in thetas.iter().enumerate() {
        let row: Vec<String> = t.as_slice().iter().map(|&v| fmt_f64(v)).collect();
        writeln!(f, "{rep},{}", row.join(","))?;
    }
    f.flush()?;

    RunManifest::new("simulate", args.seed, args, &spec)?.write(&args.out)?;
    println!("wrote {} datasets ({}, m = {}, n = {}) to {}", args.reps, spec.scene, spec.m, spec.n, args.out.display());
    Ok(())
}

pub fn map(args: &MapArgs) -> Result<()> {
    let data = CrossProductData::load(&args.data)?;
    let options = MapOptions { grad_tol: args.grad_tol, max_iter: args.max_iter };
    let fit = fit_map(&data, &options)?;
    fs::create_dir_all(&args.out)?;
    match args.format {
        Format::Json => write_json(&args.out.join("map.json"), &fit)?,
        Format::Csv => {
            let mut f = create(&args.out.join("map.csv"))?;
            writeln!(f, "index,theta_hat,std_error")?;
            for (i, v) in fit.theta_hat.as_slice().iter().enumerate() {
                writeln!(f, "{i},{},{}", fmt_f64(*v), fmt_f64(fit.sigma_theta_hat[(i, i)].sqrt()))?;
            }
            f.flush()?;
        }
    }
    RunManifest::new("map", 0, args, &options)?.write(&args.out)?;
    println!(
        "MAP: log posterior {:.6}, gradient norm {:.2e}, {} iterations{}",
        fit.log_posterior,
        fit.grad_norm,
        fit.iterations,
        if fit.converged { "" } else { " (not converged)" }
    );
    Ok(())
}

pub fn mcmc(args: &McmcArgs) -> Result<()> {
    let data = CrossProductData::load(&args.data)?;
    let config = args.sampler.config(args.seed);
    let draws = run_mcmc(&FactorModel::default(), &data, &config, &default_init(&data))?;
    fs::create_dir_all(&args.out)?;
    let mut f = create(&args.out.join("draws.csv"))?;
    draws.write_csv(&mut f)?;
    f.flush()?;
    write_json(&args.out.join("diagnostics.json"), &draws.diagnostics())?;
    RunManifest::new("mcmc", args.seed, args, &config)?.write(&args.out)?;
    let max_psrf = draws.psrf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_ess = draws.ess.iter().copied().fold(f64::INFINITY, f64::min);
    println!("{} draws; max PSRF {max_psrf:.4}, min ESS {min_ess:.1}", draws.len());
    if !draws.converged {
        eprintln!("warning: convergence screen failed (PSRF <= 1.1 and ESS >= 100)");
    }
    Ok(())
}

#[derive(Serialize)]
struct CalibrateResolved {
    nominal_alphas: Vec<f64>,
    tuning: calibayes::sprsa::TuningConstants,
    mcmc: calibayes::mcmc::McmcConfig,
    map: MapOptions,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let tuning = args.tuning.tuning()?;
    let alphas = match &args.alphas {
        Some(a) => a.clone(),
        None => nominal_alpha_grid(args.grid),
    };
    if alphas.is_empty() {
        return Err(Error::InvalidConfig("empty alpha grid".into()));
    }
    let data = CrossProductData::load(&args.data)?;
    let model = FactorModel::default();
    let options = MapOptions::default();
    let fit = fit_map(&data, &options)?;
    let mcmc_config = args.sampler.config(derive_seed(args.seed, Purpose::Mcmc, 0, 0));
    let draws = run_mcmc(&model, &data, &mcmc_config, &default_init(&data))?;
    if !draws.converged {
        eprintln!("warning: posterior draws failed the convergence screen");
    }
    let target = FactorTarget::new(args.statistic, &model, &data, &fit);
    let curve = calibrate_curve(&target, &draws.draws, &alphas, &tuning, args.seed)?;
    if curve.reliable.iter().any(|r| !r) {
        eprintln!("warning: some thresholds skipped more than 5% of their iterations");
    }

    fs::create_dir_all(&args.out)?;
    match args.format {
        Format::Csv => {
            let mut f = create(&args.out.join("curve.csv"))?;
            curve.write_csv(&mut f)?;
            f.flush()?;
        }
        Format::Json => fs::write(args.out.join("curve.json"), curve.to_json()? + "\n")?,
    }
    let resolved = CalibrateResolved { nominal_alphas: alphas, tuning, mcmc: mcmc_config, map: options };
    RunManifest::new("calibrate", args.seed, args, &resolved)?.write(&args.out)?;
    println!("{:>8} {:>12} {:>10}", "nominal", "xi", "calibrated");
    for i in 0..curve.len() {
        println!("{:>8.4} {:>12.5} {:>10.4}", curve.nominal_alphas[i], curve.thresholds[i], curve.calibrated_alphas[i]);
    }
    Ok(())
}

pub fn experiment(args: &ExperimentArgs) -> Result<()> {
    let spec = SceneSpec { scene: args.scene, m: args.m, n: args.n, replications: args.reps, seed: args.seed };
    let kinds = if args.statistic.is_empty() { StatisticKind::ALL.to_vec() } else { args.statistic.clone() };
    let config = ExperimentConfig {
        spec,
        kinds: kinds.clone(),
        tuning: args.tuning.tuning()?,
        mcmc: args.sampler.config(0),
        map: MapOptions::default(),
        calibrate: !args.no_calibrate,
    };
    let alphas = args.alphas.clone().unwrap_or_else(default_alpha_grid);
    println!("running {} replications of {} (m = {}, n = {})", spec.replications, spec.scene, spec.m, spec.n);
    let records = run_experiment(&config)?;
    let flagged = records.iter().filter(|r| r.is_flagged()).count();
    if flagged > 0 {
        eprintln!("warning: {flagged} of {} replications flagged", records.len());
    }
    let summaries = kinds
        .iter()
        .map(|&k| edf_summary(&records, k, &alphas, args.include_flagged))
        .collect::<Result<Vec<_>>>()?;
    write_results(&args.out, &records, &summaries, &kinds)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        experiment: &'a ExperimentConfig,
        edf_alphas: &'a [f64],
        include_flagged: bool,
    }
    let resolved = Resolved { experiment: &config, edf_alphas: &alphas, include_flagged: args.include_flagged };
    RunManifest::new("experiment", args.seed, args, &resolved)?.write(&args.out)?;

    for s in &summaries {
        let over = |v: Vec<f64>| if v.is_empty() { "none".to_string() } else { format!("{v:?}") };
        println!("{}: {} records; original EDF above band at {}", s.kind, s.records, over(s.original_violations()));
        if !s.edf_calibrated.is_empty() {
            println!("{}: calibrated EDF above band at {}", s.kind, over(s.calibrated_violations()));
        }
    }
    Ok(())
}

pub fn replay(args: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::read(&args.manifest)?;
    let mut value = manifest.args.clone();
    let out = match &args.out {
        Some(out) => out.clone(),
        None => args.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    value["out"] = serde_json::to_value(out)?;
    let bad = |e: serde_json::Error| Error::Parse(format!("manifest arguments: {e}"));
    match manifest.command.as_str() {
        "simulate" => simulate(&serde_json::from_value(value).map_err(bad)?),
        "map" => map(&serde_json::from_value(value).map_err(bad)?),
        "mcmc" => mcmc(&serde_json::from_value(value).map_err(bad)?),
        "calibrate" => calibrate(&serde_json::from_value(value).map_err(bad)?),
        "experiment" => experiment(&serde_json::from_value(value).map_err(bad)?),
        other => Err(Error::Parse(format!("manifest records unknown command `{other}`"))),
    }
}
