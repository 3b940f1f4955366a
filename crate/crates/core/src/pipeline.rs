//! End-to-end forecasting study: preprocess, tune on the initial window,
//! fit, forecast on an expanding window and compare against the baselines.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::preprocess;
use crate::em::{em_fit, FitResult};
use crate::error::{Error, Result};
use crate::forecast::{
    dm_test, expanding_baseline, expanding_eval, reality_check, regime_conditional_r2, DmResult, ForecastMethod,
    ForecastRun, RealityCheck, RegimeR2,
};
use crate::model::Dataset;
use crate::tuning::{default_grid, tune, TuneResult, TuningGrid};

/// Grid from the configuration, or the data-driven default.
pub fn grid_for(cfg: &RunConfig, data: &Dataset, spec: &crate::model::ModelSpec) -> Result<TuningGrid> {
    if cfg.grid.is_empty() {
        let default = default_grid(data, spec)?;
        let l = default.lambdas();
        TuningGrid::log_spaced(l[l.len() - 1], l[0], cfg.grid_points, cfg.grid_ratio)
    } else {
        TuningGrid::new(cfg.grid.clone(), cfg.grid_ratio)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTests {
    pub dm_vs_historical_average: DmResult,
    pub dm_vs_arma: DmResult,
    /// Benchmark: historical average; candidates: MS-VAR and ARMA(1,1).
    pub reality_check: RealityCheck,
}

#[derive(Debug, Clone)]
pub struct ForecastStudy {
    pub data: Dataset,
    pub tuned: TuneResult,
    pub full_fit: FitResult,
    pub regime_r2: Vec<RegimeR2>,
    pub msvar: ForecastRun,
    pub historical_average: ForecastRun,
    pub arma: ForecastRun,
    pub tests: ComparisonTests,
}

/// Runs the study described by `cfg` on raw data.
///
/// Forecast origins run from `forecast_start` (default: half the
/// preprocessed sample) to the end. The penalty is tuned once on the rows
/// before the first origin.
pub fn forecast_study(raw: &Dataset, cfg: &RunConfig) -> Result<ForecastStudy> {
    let data = preprocess(raw, cfg.detrend, cfg.standardize)?;
    let spec = cfg.spec(data.dim(), data.exo_dim())?;
    let n = data.n_obs();
    let start = cfg.forecast_start.unwrap_or(n / 2);
    if start >= n {
        return Err(Error::Config(format!("forecast_start {start} leaves no origins in {n} observations")));
    }
    let opts = cfg.em_options();
    let window = data.prefix(start);
    let grid = grid_for(cfg, &window, &spec)?;
    let tuned = tune(&window, &spec, cfg.estimator, &grid, &opts)?;
    let penalty = tuned.best.penalty.clone();

    let full_fit = em_fit(&data, &spec, &penalty, &opts)?;
    let regime_r2 = regime_conditional_r2(&full_fit, &data, cfg.regime_threshold, cfg.target)?;

    let msvar = expanding_eval(&data, &spec, &penalty, start..n, cfg.refit_every, cfg.target, &opts)?;
    let historical_average =
        expanding_baseline(&data, start..n, cfg.target, ForecastMethod::HistoricalAverage)?.restrict_to(&msvar.origins)?;
    let arma = expanding_baseline(&data, start..n, cfg.target, ForecastMethod::Arma11)?.restrict_to(&msvar.origins)?;

    let tests = ComparisonTests {
        dm_vs_historical_average: dm_test(&msvar.errors, &historical_average.errors, cfg.one_sided, cfg.small_sample)?,
        dm_vs_arma: dm_test(&msvar.errors, &arma.errors, cfg.one_sided, cfg.small_sample)?,
        reality_check: reality_check(
            &historical_average.errors,
            &[msvar.errors.clone(), arma.errors.clone()],
            cfg.bootstrap_reps,
            cfg.mean_block,
            cfg.seed,
        )?,
    };
    Ok(ForecastStudy { data, tuned, full_fit, regime_r2, msvar, historical_average, arma, tests })
}
