//! Monte Carlo replication of the simulation designs:
//! simulate → tune → fit → align → metrics, per replication.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::EmOptions;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, rmse_from_errors, ReplicationReport, Rmse};
use crate::penalties::PenaltyFamily;
use crate::simulate::{dgp, simulate_msvar, stream_rng, Experiment};
use crate::tuning::{default_grid, tune_lasso, tune_scad, TuningGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateConfig {
    pub experiment: Experiment,
    pub d: usize,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub estimators: Vec<PenaltyFamily>,
    pub seed: u64,
    pub burn_in: usize,
    /// Explicit grid; empty means the data-driven default.
    pub grid: Vec<f64>,
    pub grid_ratio: f64,
    pub restarts: usize,
}

impl ReplicateConfig {
    pub fn new(experiment: Experiment, d: usize, sample_sizes: Vec<usize>, replications: usize) -> Self {
        Self {
            experiment,
            d,
            sample_sizes,
            replications,
            estimators: vec![PenaltyFamily::Lasso, PenaltyFamily::ScadLla],
            seed: 0,
            burn_in: crate::simulate::DEFAULT_BURN_IN,
            grid: Vec::new(),
            grid_ratio: 1.0,
            restarts: EmOptions::default().n_restarts,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sample_sizes.is_empty() || self.replications == 0 || self.estimators.is_empty() {
            return Err(Error::Config("need at least one sample size, replication and estimator".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be positive".into()));
        }
        Ok(())
    }
}

/// Seed of replication `rep` at sample size `t`, independent of worker scheduling.
pub fn replication_seed(master: u64, experiment: Experiment, d: usize, t: usize, rep: usize) -> u64 {
    let stream = ((experiment.id() as u64) << 56) ^ ((d as u64) << 44) ^ ((t as u64) << 24) ^ rep as u64;
    stream_rng(master, stream).gen()
}

/// Outcome of one estimator on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub t: usize,
    pub replication: usize,
    pub seed: u64,
    pub estimator: PenaltyFamily,
    pub lambda_coef: Option<f64>,
    pub result: std::result::Result<ReplicationReport, String>,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub experiment: u8,
    pub d: usize,
    pub t: usize,
    pub estimator: PenaltyFamily,
    pub succeeded: usize,
    pub failed: usize,
    pub true_model_included: f64,
    pub selected: f64,
    pub share_nonzero: f64,
    pub rmse: Rmse,
}

#[derive(Debug, Clone)]
pub struct ReplicationRun {
    pub config: ReplicateConfig,
    pub outcomes: Vec<ReplicationOutcome>,
    pub table: Vec<TableRow>,
}

impl ReplicationRun {
    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.result.is_err()).count()
    }
}

fn run_one(cfg: &ReplicateConfig, t: usize, rep: usize) -> Vec<ReplicationOutcome> {
    let seed = replication_seed(cfg.seed, cfg.experiment, cfg.d, t, rep);
    let failed = |msg: String| {
        cfg.estimators
            .iter()
            .map(|&estimator| ReplicationOutcome { t, replication: rep, seed, estimator, lambda_coef: None, result: Err(msg.clone()) })
            .collect()
    };
    let truth = match dgp(cfg.experiment, cfg.d) {
        Ok(m) => m,
        Err(e) => return failed(e.to_string()),
    };
    let data = match simulate_msvar(&truth, t, cfg.burn_in, seed) {
        Ok(s) => s.data,
        Err(e) => {
            log::warn!("T={t} replication {rep}: {e}");
            return failed(e.to_string());
        }
    };
    let grid = if cfg.grid.is_empty() {
        default_grid(&data, truth.spec())
    } else {
        TuningGrid::new(cfg.grid.clone(), cfg.grid_ratio)
    };
    let grid = match grid {
        Ok(g) => g,
        Err(e) => return failed(e.to_string()),
    };
    let opts = EmOptions { seed, n_restarts: cfg.restarts, ..EmOptions::default() };
    let lasso = tune_lasso(&data, truth.spec(), &grid, &opts);
    cfg.estimators
        .iter()
        .map(|&estimator| {
            let tuned = match (&lasso, estimator) {
                (Ok(l), PenaltyFamily::Lasso) => Ok(l.clone()),
                (Ok(l), PenaltyFamily::ScadLla) => tune_scad(&data, &grid, &l.best, &opts),
                (Err(e), _) => Err(Error::Numerical(e.to_string())),
            };
            let lambda_coef = tuned.as_ref().ok().map(|r| r.best.penalty.lambda_coef);
            let result = tuned
                .and_then(|r| evaluate(&r.best.model, &truth))
                .map_err(|e| {
                    log::warn!("T={t} replication {rep} {estimator:?}: {e}");
                    e.to_string()
                });
            ReplicationOutcome { t, replication: rep, seed, estimator, lambda_coef, result }
        })
        .collect()
}

fn summarize_cell(cfg: &ReplicateConfig, t: usize, estimator: PenaltyFamily, outcomes: &[ReplicationOutcome]) -> TableRow {
    let reports: Vec<&ReplicationReport> = outcomes
        .iter()
        .filter(|o| o.t == t && o.estimator == estimator)
        .filter_map(|o| o.result.as_ref().ok())
        .collect();
    let failed = outcomes.iter().filter(|o| o.t == t && o.estimator == estimator && o.result.is_err()).count();
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&ReplicationReport) -> f64| {
        if reports.is_empty() {
            f64::NAN
        } else {
            reports.iter().map(|r| f(r)).sum::<f64>() / n
        }
    };
    let errors: Vec<_> = reports.iter().map(|r| r.errors).collect();
    let nan = Rmse { total: f64::NAN, var: f64::NAN, cov: f64::NAN, p: f64::NAN };
    TableRow {
        experiment: cfg.experiment.id(),
        d: cfg.d,
        t,
        estimator,
        succeeded: reports.len(),
        failed,
        true_model_included: mean(&|r| f64::from(u8::from(r.selection.true_model_included))),
        selected: mean(&|r| r.selection.selected as f64),
        share_nonzero: mean(&|r| r.selection.share_nonzero),
        rmse: rmse_from_errors(&errors).unwrap_or(nan),
    }
}

/// Runs every (sample size, replication) pair in parallel on the current rayon pool.
///
/// Outcomes are ordered by sample size, replication and estimator regardless
/// of scheduling, so output is identical for any worker count.
pub fn replicate_experiments(cfg: &ReplicateConfig) -> Result<ReplicationRun> {
    cfg.validate()?;
    dgp(cfg.experiment, cfg.d)?;
    let jobs: Vec<(usize, usize)> = cfg
        .sample_sizes
        .iter()
        .flat_map(|&t| (0..cfg.replications).map(move |r| (t, r)))
        .collect();
    let outcomes: Vec<ReplicationOutcome> = jobs.par_iter().flat_map_iter(|&(t, r)| run_one(cfg, t, r)).collect();
    let table = cfg
        .sample_sizes
        .iter()
        .flat_map(|&t| cfg.estimators.iter().map(move |&e| (t, e)))
        .map(|(t, e)| summarize_cell(cfg, t, e, &outcomes))
        .collect();
    let run = ReplicationRun { config: cfg.clone(), outcomes, table };
    if run.failures() > 0 {
        log::warn!("{} of {} estimator runs failed", run.failures(), run.outcomes.len());
    }
    Ok(run)
}

fn estimator_name(e: PenaltyFamily) -> &'static str {
    match e {
        PenaltyFamily::Lasso => "lasso",
        PenaltyFamily::ScadLla => "scad",
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Summary CSV, one row per sample size and estimator.
pub fn write_table<W: Write>(table: &[TableRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "experiment", "d", "t", "estimator", "succeeded", "failed", "true_model_included", "selected",
        "share_nonzero", "rmse_total", "rmse_var", "rmse_cov", "rmse_p",
    ])?;
    for r in table {
        w.write_record([
            r.experiment.to_string(),
            r.d.to_string(),
            r.t.to_string(),
            estimator_name(r.estimator).to_string(),
            r.succeeded.to_string(),
            r.failed.to_string(),
            num(r.true_model_included),
            num(r.selected),
            num(r.share_nonzero),
            num(r.rmse.total),
            num(r.rmse.var),
            num(r.rmse.cov),
            num(r.rmse.p),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-replication CSV with squared errors, or the failure message.
pub fn write_outcomes<W: Write>(outcomes: &[ReplicationOutcome], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t", "replication", "seed", "estimator", "lambda_coef", "true_model_included", "selected",
        "share_nonzero", "sq_var", "sq_cov", "sq_p", "error",
    ])?;
    for o in outcomes {
        let lambda = o.lambda_coef.map(num).unwrap_or_default();
        let mut row = vec![o.t.to_string(), o.replication.to_string(), o.seed.to_string(), estimator_name(o.estimator).to_string(), lambda];
        match &o.result {
            Ok(r) => row.extend([
                r.selection.true_model_included.to_string(),
                r.selection.selected.to_string(),
                num(r.selection.share_nonzero),
                num(r.errors.var),
                num(r.errors.cov),
                num(r.errors.p),
                String::new(),
            ]),
            Err(e) => {
                row.extend(std::iter::repeat(String::new()).take(6));
                row.push(e.clone());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Seed, grid and version information for a replication run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub schema: String,
    pub package: String,
    pub version: String,
    pub config: ReplicateConfig,
    pub grid: String,
    pub failures: usize,
    pub replication_seeds: Vec<(usize, usize, u64)>,
}

impl Provenance {
    pub fn new(run: &ReplicationRun) -> Self {
        let grid = if run.config.grid.is_empty() {
            "10 log-spaced values over [0.01, 1] x max |corr(regressor, response)|, ratio 1".to_string()
        } else {
            format!("{:?}, ratio {}", run.config.grid, run.config.grid_ratio)
        };
        let mut seeds: Vec<(usize, usize, u64)> = run.outcomes.iter().map(|o| (o.t, o.replication, o.seed)).collect();
        seeds.dedup();
        Self {
            schema: crate::config::SCHEMA_VERSION.to_string(),
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: run.config.clone(),
            grid,
            failures: run.failures(),
            replication_seeds: seeds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(exp: Experiment, reps: usize) -> ReplicateConfig {
        let mut cfg = ReplicateConfig::new(exp, 4, vec![120], reps);
        cfg.seed = 5;
        cfg.restarts = 2;
        cfg
    }

    #[test]
    fn smoke_single_replication() {
        let run = replicate_experiments(&small(Experiment::One, 1)).unwrap();
        assert_eq!(run.outcomes.len(), 2);
        assert_eq!(run.table.len(), 2);
        assert!(run.outcomes.iter().all(|o| o.result.is_ok()));
        assert_eq!(run.table[0].succeeded, 1);
        let mut out = Vec::new();
        write_table(&run.table, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 3);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let cfg = small(Experiment::One, 3);
        let render = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let run = pool.install(|| replicate_experiments(&cfg)).unwrap();
            let mut a = Vec::new();
            write_table(&run.table, &mut a).unwrap();
            write_outcomes(&run.outcomes, &mut a).unwrap();
            a
        };
        assert_eq!(render(1), render(3));
    }

    #[test]
    fn failures_are_counted_not_fatal() {
        let mut cfg = small(Experiment::Two, 2);
        cfg.d = 10;
        cfg.sample_sizes = vec![300];
        let run = replicate_experiments(&cfg).unwrap();
        assert_eq!(run.failures(), 4);
        assert_eq!(run.table[0].failed, 2);
        assert!(run.table[0].rmse.total.is_nan());
        let mut out = Vec::new();
        write_outcomes(&run.outcomes, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().contains("explosive"));
    }

    #[test]
    fn seeds_depend_on_every_coordinate() {
        let base = replication_seed(1, Experiment::One, 10, 100, 0);
        assert_ne!(base, replication_seed(2, Experiment::One, 10, 100, 0));
        assert_ne!(base, replication_seed(1, Experiment::Two, 10, 100, 0));
        assert_ne!(base, replication_seed(1, Experiment::One, 16, 100, 0));
        assert_ne!(base, replication_seed(1, Experiment::One, 10, 200, 0));
        assert_ne!(base, replication_seed(1, Experiment::One, 10, 100, 1));
    }
}
