//! One-step-ahead forecasts on an expanding window, baselines and
//! forecast-comparison tests.

use std::io::Write;
use std::ops::Range;

use argmin::core::{CostFunction, Executor, State, TerminationReason};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::em::{em_fit, smoothed_states, EmOptions, FitResult};
use crate::error::{Error, Result};
use crate::metrics::NONZERO_TOL;
use crate::model::{regressors, Dataset, Design, ModelSpec, MsVarModel};
use crate::penalties::PenaltyConfig;
use crate::simulate::stream_rng;

/// Minimum history for the ARMA(1,1) baseline.
pub const ARMA_MIN_OBS: usize = 24;
pub const DEFAULT_BOOTSTRAP_REPS: usize = 999;
pub const DEFAULT_MEAN_BLOCK: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForecastMethod {
    MsVar,
    HistoricalAverage,
    Arma11,
}

impl std::fmt::Display for ForecastMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ForecastMethod::MsVar => "msvar",
            ForecastMethod::HistoricalAverage => "historical_average",
            ForecastMethod::Arma11 => "arma11",
        })
    }
}

/// Forecasts of one target series at a sequence of origins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRun {
    pub method: ForecastMethod,
    /// Row index of the forecast observation; the forecast uses rows before it.
    pub origins: Vec<usize>,
    pub forecasts: Vec<f64>,
    pub realized: Vec<f64>,
    /// `realized − forecast`.
    pub errors: Vec<f64>,
    pub msfe: f64,
    /// Origins whose model fit failed and were skipped.
    pub skipped: Vec<usize>,
    /// Origins where the ARMA fit fell back to the historical average.
    pub fallbacks: Vec<usize>,
}

impl ForecastRun {
    fn from_points(method: ForecastMethod, points: Vec<(usize, f64, f64)>, skipped: Vec<usize>, fallbacks: Vec<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Numerical(format!("{method}: every forecast origin failed")));
        }
        let (mut origins, mut forecasts, mut realized, mut errors) = (vec![], vec![], vec![], vec![]);
        for (t, f, r) in points {
            origins.push(t);
            forecasts.push(f);
            realized.push(r);
            errors.push(r - f);
        }
        let msfe = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
        Ok(Self { method, origins, forecasts, realized, errors, msfe, skipped, fallbacks })
    }

    /// Restricts the run to the given origins, keeping their order.
    pub fn restrict_to(&self, origins: &[usize]) -> Result<Self> {
        let points = origins
            .iter()
            .map(|o| {
                let i = self.origins.iter().position(|x| x == o).ok_or_else(|| {
                    Error::InvalidArgument(format!("origin {o} missing from the {} run", self.method))
                })?;
                Ok((*o, self.forecasts[i], self.realized[i]))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_points(self.method, points, self.skipped.clone(), self.fallbacks.clone())
    }
}

/// Regime-weighted one-step-ahead forecast of all series after the last row of `history`.
pub fn one_step_forecast(model: &MsVarModel, history: &Dataset) -> Result<DVector<f64>> {
    let spec = model.spec();
    if history.n_obs() <= spec.max_lag() {
        return Err(Error::Data(format!(
            "forecast needs more than {} observations, got {}",
            spec.max_lag(),
            history.n_obs()
        )));
    }
    let smoothed = smoothed_states(history, model)?;
    let last = smoothed.gamma.row(smoothed.n_steps() - 1).transpose();
    let ahead = model.trans().tr_mul(&last);
    let z = regressors(history, spec, history.n_obs())?;
    let mut out = DVector::zeros(spec.d);
    for (s, r) in model.regimes().iter().enumerate() {
        out += ahead[s] * r.coef().tr_mul(&z);
    }
    Ok(out)
}

fn check_origins(data: &Dataset, origins: &Range<usize>, min_history: usize) -> Result<()> {
    if origins.is_empty() || origins.start < min_history || origins.end > data.n_obs() {
        return Err(Error::InvalidArgument(format!(
            "origins {origins:?} must be nonempty within [{min_history}, {}]",
            data.n_obs()
        )));
    }
    Ok(())
}

/// Expanding-window evaluation of the MS-VAR forecast of series `target`.
///
/// The model is refitted every `refit_every` origins (`None` fits once at
/// the first origin). Refit blocks are independent and run in parallel.
pub fn expanding_eval(
    data: &Dataset,
    spec: &ModelSpec,
    penalty: &PenaltyConfig,
    origins: Range<usize>,
    refit_every: Option<usize>,
    target: usize,
    opts: &EmOptions,
) -> Result<ForecastRun> {
    if target >= data.dim() {
        return Err(Error::InvalidArgument(format!("target series {target} out of range")));
    }
    check_origins(data, &origins, spec.max_lag() + 1)?;
    let every = match refit_every {
        Some(0) => return Err(Error::InvalidArgument("refit_every must be positive".into())),
        Some(k) => k,
        None => origins.len(),
    };
    let starts: Vec<usize> = origins.clone().step_by(every).collect();
    let blocks: Vec<(Vec<(usize, f64, f64)>, Vec<usize>)> = starts
        .par_iter()
        .map(|&start| {
            let block = start..(start + every).min(origins.end);
            let fit = em_fit(&data.prefix(start), spec, penalty, opts);
            match fit {
                Ok(fit) => {
                    let mut points = Vec::new();
                    let mut skipped = Vec::new();
                    for t in block {
                        match one_step_forecast(&fit.model, &data.prefix(t)) {
                            Ok(f) => points.push((t, f[target], data.y()[(t, target)])),
                            Err(e) => {
                                log::warn!("origin {t}: forecast failed: {e}");
                                skipped.push(t);
                            }
                        }
                    }
                    (points, skipped)
                }
                Err(e) => {
                    log::warn!("origins {block:?}: fit failed: {e}");
                    (Vec::new(), block.collect())
                }
            }
        })
        .collect();
    let (mut points, mut skipped) = (Vec::new(), Vec::new());
    for (p, s) in blocks {
        points.extend(p);
        skipped.extend(s);
    }
    ForecastRun::from_points(ForecastMethod::MsVar, points, skipped, Vec::new())
}

/// Mean of all past values.
pub fn historical_average(history: &[f64]) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::Data("historical average of an empty series".into()));
    }
    Ok(history.iter().sum::<f64>() / history.len() as f64)
}

/// Fitted ARMA(1,1) with its one-step prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmaForecast {
    pub forecast: f64,
    pub constant: f64,
    pub ar: f64,
    pub ma: f64,
    /// The optimizer did not converge and the historical average was returned.
    pub fallback: bool,
}

struct Css<'a> {
    y: &'a [f64],
}

impl Css<'_> {
    /// Parameters `(c, atanh φ, atanh θ)` keep both roots inside the unit circle.
    fn unpack(p: &[f64]) -> (f64, f64, f64) {
        (p[0], p[1].tanh(), p[2].tanh())
    }

    /// Sum of squared innovations and the last innovation, with `e_0 = 0`.
    fn residuals(&self, c: f64, phi: f64, theta: f64) -> (f64, f64) {
        let mut e = 0.0;
        let mut ssr = 0.0;
        for w in self.y.windows(2) {
            e = w[1] - c - phi * w[0] - theta * e;
            ssr += e * e;
        }
        (ssr, e)
    }
}

impl CostFunction for Css<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let (c, phi, theta) = Self::unpack(p);
        Ok(self.residuals(c, phi, theta).0)
    }
}

/// ARMA(1,1) by conditional sum of squares with a Nelder-Mead search.
pub fn arma11_forecast(history: &[f64]) -> Result<ArmaForecast> {
    if history.len() < ARMA_MIN_OBS {
        return Err(Error::Data(format!("ARMA(1,1) needs {ARMA_MIN_OBS} observations, got {}", history.len())));
    }
    let mean = historical_average(history)?;
    let var = history.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let fallback = ArmaForecast { forecast: mean, constant: mean, ar: 0.0, ma: 0.0, fallback: true };
    if var == 0.0 {
        return Ok(ArmaForecast { fallback: false, ..fallback });
    }
    let acf1 = history.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / var;
    let phi0 = acf1.clamp(-0.9, 0.9);
    let start = vec![mean * (1.0 - phi0), phi0.atanh(), 0.0];
    let spread = var.sqrt() / (history.len() as f64).sqrt();
    let mut simplex = vec![start.clone()];
    for (i, step) in [spread.max(1e-3), 0.2, 0.2].into_iter().enumerate() {
        let mut v = start.clone();
        v[i] += step;
        simplex.push(v);
    }
    let tol = 1e-12 * var;
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(tol)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let res = match Executor::new(Css { y: history }, solver).configure(|s| s.max_iters(5000)).run() {
        Ok(r) => r,
        Err(e) => {
            log::warn!("ARMA(1,1) optimizer failed: {e}; using the historical average");
            return Ok(fallback);
        }
    };
    let state = res.state();
    let converged = matches!(state.get_termination_reason(), Some(TerminationReason::SolverConverged));
    let best = match state.get_best_param() {
        Some(p) if converged => p,
        _ => {
            log::warn!("ARMA(1,1) did not converge; using the historical average");
            return Ok(fallback);
        }
    };
    let (c, phi, theta) = Css::unpack(best);
    let (_, last) = Css { y: history }.residuals(c, phi, theta);
    let forecast = c + phi * history[history.len() - 1] + theta * last;
    Ok(ArmaForecast { forecast, constant: c, ar: phi, ma: theta, fallback: false })
}

/// Expanding-window forecasts of `target` from a univariate baseline.
pub fn expanding_baseline(data: &Dataset, origins: Range<usize>, target: usize, method: ForecastMethod) -> Result<ForecastRun> {
    if target >= data.dim() {
        return Err(Error::InvalidArgument(format!("target series {target} out of range")));
    }
    let min_history = match method {
        ForecastMethod::HistoricalAverage => 1,
        ForecastMethod::Arma11 => ARMA_MIN_OBS,
        ForecastMethod::MsVar => {
            return Err(Error::InvalidArgument("use expanding_eval for the MS-VAR forecast".into()))
        }
    };
    check_origins(data, &origins, min_history)?;
    let series: Vec<f64> = data.y().column(target).iter().copied().collect();
    let results: Vec<Result<(usize, f64, bool)>> = origins
        .clone()
        .into_par_iter()
        .map(|t| {
            let history = &series[..t];
            match method {
                ForecastMethod::Arma11 => arma11_forecast(history).map(|f| (t, f.forecast, f.fallback)),
                _ => historical_average(history).map(|f| (t, f, false)),
            }
        })
        .collect();
    let mut points = Vec::new();
    let mut fallbacks = Vec::new();
    for r in results {
        let (t, f, fell_back) = r?;
        if fell_back {
            fallbacks.push(t);
        }
        points.push((t, f, series[t]));
    }
    ForecastRun::from_points(method, points, Vec::new(), fallbacks)
}

/// Writes `origin,forecast,realized,error` rows.
pub fn write_forecast_run<W: Write>(run: &ForecastRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["origin", "forecast", "realized", "error"])?;
    for i in 0..run.origins.len() {
        w.write_record([
            run.origins[i].to_string(),
            format!("{:.16e}", run.forecasts[i]),
            format!("{:.16e}", run.realized[i]),
            format!("{:.16e}", run.errors[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
    /// The loss differential has zero variance.
    pub degenerate: bool,
}

/// Diebold-Mariano test on squared-error loss at horizon one.
///
/// `d_t = e_a² − e_b²`; the one-sided alternative is that `a` is more
/// accurate (negative mean differential). The variance is the lag-0 sample
/// variance; `small_sample` applies the Harvey-Leybourne-Newbold factor and
/// Student-t reference.
pub fn dm_test(errors_a: &[f64], errors_b: &[f64], one_sided: bool, small_sample: bool) -> Result<DmResult> {
    let n = errors_a.len();
    if n != errors_b.len() {
        return Err(Error::Dimension(format!("error series of length {n} and {}", errors_b.len())));
    }
    if n < 10 {
        return Err(Error::InvalidArgument(format!("DM test needs at least 10 errors, got {n}")));
    }
    let d: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a * a - b * b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let p_of = |stat: f64, cdf: &dyn Fn(f64) -> f64| if one_sided { cdf(stat) } else { 2.0 * cdf(-stat.abs()) };
    if var == 0.0 {
        let statistic = if mean < 0.0 {
            f64::NEG_INFINITY
        } else if mean > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let p_value = match (one_sided, statistic) {
            (_, s) if s == 0.0 => if one_sided { 0.5 } else { 1.0 },
            (true, s) => if s < 0.0 { 0.0 } else { 1.0 },
            (false, _) => 0.0,
        };
        log::warn!("DM loss differential is constant");
        return Ok(DmResult { statistic, p_value, degenerate: true });
    }
    let mut statistic = mean / (var / n as f64).sqrt();
    let p_value = if small_sample {
        statistic *= ((n - 1) as f64 / n as f64).sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numerical(e.to_string()))?;
        p_of(statistic, &|x| t.cdf(x))
    } else {
        let z = Normal::standard();
        p_of(statistic, &|x| z.cdf(x))
    };
    Ok(DmResult { statistic, p_value, degenerate: false })
}

/// Row indices of one stationary-bootstrap resample of length `n`.
pub fn stationary_bootstrap_indices<R: Rng>(n: usize, mean_block: f64, rng: &mut R) -> Vec<usize> {
    let restart = 1.0 / mean_block;
    let mut idx = Vec::with_capacity(n);
    let mut i = rng.gen_range(0..n);
    for _ in 0..n {
        idx.push(i);
        i = if rng.gen::<f64>() < restart { rng.gen_range(0..n) } else { (i + 1) % n };
    }
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealityCheck {
    /// `max_k √n · mean(L_bench − L_k)`.
    pub statistic: f64,
    pub p_value: f64,
    /// Every loss differential series is constant.
    pub degenerate: bool,
}

/// White's Reality Check that the best candidate beats the benchmark on squared-error loss.
///
/// `p = (1 + #{V*_b ≥ V}) / (B + 1)` with stationary-bootstrap replicates
/// centred at the sample means. Replicate `b` draws from its own stream of `seed`.
pub fn reality_check(
    benchmark: &[f64],
    candidates: &[Vec<f64>],
    reps: usize,
    mean_block: f64,
    seed: u64,
) -> Result<RealityCheck> {
    let n = benchmark.len();
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("reality check needs at least one candidate".into()));
    }
    if candidates.iter().any(|c| c.len() != n) {
        return Err(Error::Dimension("candidate and benchmark errors differ in length".into()));
    }
    if n < 2 || reps < 199 || !(mean_block >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "reality check needs n >= 2, B >= 199 and mean block >= 1 (got {n}, {reps}, {mean_block})"
        )));
    }
    let diffs: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| benchmark.iter().zip(c).map(|(b, e)| b * b - e * e).collect())
        .collect();
    let means: Vec<f64> = diffs.iter().map(|f| f.iter().sum::<f64>() / n as f64).collect();
    let root_n = (n as f64).sqrt();
    let statistic = means.iter().fold(f64::NEG_INFINITY, |m, v| m.max(root_n * v));
    let degenerate = diffs.iter().all(|f| f.iter().all(|v| *v == f[0]));
    if degenerate {
        log::warn!("reality check loss differentials are constant");
    }
    let exceed = (0..reps)
        .into_par_iter()
        .filter(|&b| {
            let mut rng = stream_rng(seed, b as u64);
            let idx = stationary_bootstrap_indices(n, mean_block, &mut rng);
            let boot = diffs.iter().zip(&means).fold(f64::NEG_INFINITY, |m, (f, mean)| {
                let star = idx.iter().map(|&i| f[i]).sum::<f64>() / n as f64;
                m.max(root_n * (star - mean))
            });
            boot >= statistic
        })
        .count();
    Ok(RealityCheck { statistic, p_value: (1 + exceed) as f64 / (reps + 1) as f64, degenerate })
}

/// Fit quality of the target equation within one regime's subsample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeR2 {
    pub state: usize,
    pub n_obs: usize,
    /// Nonzero predictors in the state's target equation, intercept excluded.
    pub n_predictors: usize,
    pub r2: f64,
    pub adjusted_r2: f64,
}

/// Adjusted R² of equation `target` over the observations classified to each
/// state by `γ_t(s) > threshold`.
pub fn regime_conditional_r2(fit: &FitResult, data: &Dataset, threshold: f64, target: usize) -> Result<Vec<RegimeR2>> {
    let spec = fit.model.spec();
    if target >= spec.d {
        return Err(Error::InvalidArgument(format!("target series {target} out of range")));
    }
    let design = Design::new(data, spec)?;
    let gamma = &fit.smoothed.gamma;
    if gamma.nrows() != design.n_usable() {
        return Err(Error::Dimension("fit and data have different sample sizes".into()));
    }
    let intercept = spec.intercept.then(|| spec.n_regressors() - 1);
    (0..spec.n_states)
        .map(|s| {
            let rows: Vec<usize> = (0..gamma.nrows()).filter(|&t| gamma[(t, s)] > threshold).collect();
            let n = rows.len();
            if n == 0 {
                return Err(Error::Data(format!("no observation classified to state {s}")));
            }
            let coef = fit.model.regime(s).coef().column(target);
            let k = (0..coef.len()).filter(|&i| Some(i) != intercept && coef[i].abs() > NONZERO_TOL).count();
            if n <= k + 1 {
                return Err(Error::Data(format!("state {s}: {n} observations for {k} predictors")));
            }
            let y: Vec<f64> = rows.iter().map(|&t| design.y[(t, target)]).collect();
            let mean = y.iter().sum::<f64>() / n as f64;
            let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
            let ssr: f64 = rows
                .iter()
                .zip(&y)
                .map(|(&t, v)| (v - design.z.row(t).dot(&coef.transpose())).powi(2))
                .sum();
            let r2 = if sst > 0.0 { 1.0 - ssr / sst } else if ssr == 0.0 { 1.0 } else { f64::NEG_INFINITY };
            let adjusted_r2 = 1.0 - (1.0 - r2) * (n - 1) as f64 / (n - k - 1) as f64;
            Ok(RegimeR2 { state: s, n_obs: n, n_predictors: k, r2, adjusted_r2 })
        })
        .collect()
}

/// Smoothed probability of each state at every usable row, for classification output.
pub fn state_probabilities(fit: &FitResult) -> &DMatrix<f64> {
    &fit.smoothed.gamma
}
