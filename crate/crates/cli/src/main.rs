//! `msvar` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msvar::artifact::{write_atomic, write_with, FitArtifact};
use msvar::config::{RunConfig, SCHEMA_VERSION};
use msvar::data::{ingest_csv, preprocess, write_csv};
use msvar::em::{em_fit, fit_scad};
use msvar::forecast::write_forecast_run;
use msvar::penalties::PenaltyFamily;
use msvar::pipeline::{forecast_study, grid_for};
use msvar::replicate::{replicate_experiments, write_outcomes, write_table, Provenance, ReplicateConfig};
use msvar::simulate::{dgp, simulate_msvar};
use msvar::tuning::{bic, tune, write_bic_table};
use msvar::{Dataset, Error, Result};

#[derive(Parser)]
#[command(name = "msvar", version, about = "Sparse Markov-switching VAR estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from one of the Monte Carlo designs.
    Simulate(Common),
    /// Fit at fixed penalty levels.
    Estimate(Common),
    /// Select penalty levels by BIC over a grid.
    Tune(Common),
    /// Run the Monte Carlo study and write the summary table.
    Replicate(Common),
    /// Expanding-window forecast evaluation against the baselines.
    Forecast(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set lambda_coef=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got \"{o}\"")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(jobs) = self.jobs {
            cfg.jobs = Some(jobs);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_atomic(cfg.out_dir.join("config.txt"), cfg.to_text().as_bytes())?;
    write_atomic(cfg.out_dir.join("SCHEMA"), format!("{SCHEMA_VERSION}\n").as_bytes())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.data.as_ref().ok_or_else(|| Error::Config("this command needs `data = <csv path>`".into()))?;
    ingest_csv(path, &cfg.exogenous)
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    let model = dgp(cfg.experiment, cfg.d)?;
    let sim = simulate_msvar(&model, cfg.n_obs, cfg.burn_in, cfg.seed)?;
    write_with(out(cfg, "data.csv"), |b| write_csv(&sim.data, b))?;
    let states: String = std::iter::once("t,state\n".to_string())
        .chain(sim.states.iter().enumerate().map(|(t, s)| format!("{t},{s}\n")))
        .collect();
    write_atomic(out(cfg, "states.csv"), states.as_bytes())?;
    println!("simulated {} observations of experiment {} (d = {})", cfg.n_obs, cfg.experiment, cfg.d);
    Ok(())
}

fn estimate(cfg: &RunConfig) -> Result<()> {
    let data = preprocess(&load_data(cfg)?, cfg.detrend, cfg.standardize)?;
    let spec = cfg.spec(data.dim(), data.exo_dim())?;
    let lasso_penalty = cfg
        .fixed_lasso()
        .ok_or_else(|| Error::Config("estimate needs lambda_coef (and optionally lambda_prec)".into()))?;
    let opts = cfg.em_options();
    let lasso = em_fit(&data, &spec, &lasso_penalty, &opts)?;
    let fit = match cfg.estimator {
        PenaltyFamily::Lasso => lasso,
        PenaltyFamily::ScadLla => fit_scad(&data, lasso_penalty.lambda_coef, lasso_penalty.lambda_prec, cfg.scad_a, &lasso, &opts)?,
    };
    let value = bic(&fit, &data).ok();
    write_atomic(out(cfg, "fit.json"), FitArtifact::new(&fit, &data, value).to_json()?.as_bytes())?;
    println!("objective {:.6} after {} iterations (converged: {})", fit.objective(), fit.iterations(), fit.converged);
    Ok(())
}

fn tune_cmd(cfg: &RunConfig) -> Result<()> {
    let data = preprocess(&load_data(cfg)?, cfg.detrend, cfg.standardize)?;
    let spec = cfg.spec(data.dim(), data.exo_dim())?;
    let grid = grid_for(cfg, &data, &spec)?;
    let tuned = tune(&data, &spec, cfg.estimator, &grid, &cfg.em_options())?;
    write_with(out(cfg, "bic.csv"), |b| write_bic_table(&tuned.table, b))?;
    let best = &tuned.table[tuned.table.iter().position(|r| r.lambda_coef == tuned.best.penalty.lambda_coef).unwrap_or(0)];
    write_atomic(out(cfg, "fit.json"), FitArtifact::new(&tuned.best, &data, Some(best.bic)).to_json()?.as_bytes())?;
    println!("selected lambda_coef = {:.6e}, BIC = {:.6}", tuned.best.penalty.lambda_coef, best.bic);
    Ok(())
}

fn replicate(cfg: &RunConfig) -> Result<()> {
    let rc = ReplicateConfig {
        experiment: cfg.experiment,
        d: cfg.d,
        sample_sizes: cfg.sample_sizes.clone(),
        replications: cfg.replications,
        estimators: cfg.estimators.clone(),
        seed: cfg.seed,
        burn_in: cfg.burn_in,
        grid: cfg.grid.clone(),
        grid_ratio: cfg.grid_ratio,
        restarts: cfg.restarts,
    };
    let run = replicate_experiments(&rc)?;
    write_with(out(cfg, "table1.csv"), |b| write_table(&run.table, b))?;
    write_with(out(cfg, "replications.csv"), |b| write_outcomes(&run.outcomes, b))?;
    write_json(&out(cfg, "provenance.json"), &Provenance::new(&run))?;
    for row in &run.table {
        println!(
            "T={} {:?}: included {:.3} selected {:.1} share {:.3} RMSE {:.3} (failed {})",
            row.t, row.estimator, row.true_model_included, row.selected, row.share_nonzero, row.rmse.total, row.failed
        );
    }
    Ok(())
}

fn forecast(cfg: &RunConfig) -> Result<()> {
    let study = forecast_study(&load_data(cfg)?, cfg)?;
    for run in [&study.msvar, &study.historical_average, &study.arma] {
        write_with(out(cfg, &format!("forecast_{}.csv", run.method)), |b| write_forecast_run(run, b))?;
    }
    write_json(&out(cfg, "tests.json"), &study.tests)?;
    write_json(&out(cfg, "regime_r2.json"), &study.regime_r2)?;
    write_atomic(out(cfg, "fit.json"), FitArtifact::new(&study.full_fit, &study.data, None).to_json()?.as_bytes())?;
    write_with(out(cfg, "bic.csv"), |b| write_bic_table(&study.tuned.table, b))?;
    println!(
        "MSFE msvar {:.6} historical average {:.6} ARMA {:.6}; DM p {:.4}/{:.4}; reality check p {:.4}",
        study.msvar.msfe,
        study.historical_average.msfe,
        study.arma.msfe,
        study.tests.dm_vs_historical_average.p_value,
        study.tests.dm_vs_arma.p_value,
        study.tests.reality_check.p_value
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (common, action): (&Common, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Simulate(c) => (c, simulate),
        Command::Estimate(c) => (c, estimate),
        Command::Tune(c) => (c, tune_cmd),
        Command::Replicate(c) => (c, replicate),
        Command::Forecast(c) => (c, forecast),
    };
    let cfg = common.resolve()?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    }
    prepare_output(&cfg)?;
    action(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
