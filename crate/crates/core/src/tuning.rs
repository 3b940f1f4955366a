//! Penalty selection by the modified BIC
//! `log|pooled residual scatter| + log(K_T) · l · log(T) / T`.
//!
//! The fit term is the log-determinant of the regime-weighted residual
//! covariance. The scalar squared-norm SSR is reported alongside it.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::{em_fit, em_from, EmOptions, FitResult};
use crate::error::{Error, Result};
use crate::linalg::logdet_spd;
use crate::metrics::NONZERO_TOL;
use crate::model::{count_params, flatten, Block, Dataset, Design, ModelSpec};
use crate::penalties::{lla_weights, PenaltyConfig, PenaltyFamily, DEFAULT_SCAD_A};

/// Descending penalty levels for the coefficients; the precision level is `ratio · λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    lambdas: Vec<f64>,
    pub ratio: f64,
}

impl TuningGrid {
    pub fn new(mut lambdas: Vec<f64>, ratio: f64) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::InvalidArgument("tuning grid is empty".into()));
        }
        if lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) || !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::InvalidArgument("grid values and ratio must be positive and finite".into()));
        }
        lambdas.sort_by(|a, b| b.total_cmp(a));
        lambdas.dedup();
        Ok(Self { lambdas, ratio })
    }

    /// `n` log-spaced values between `lo` and `hi`.
    pub fn log_spaced(lo: f64, hi: f64, n: usize, ratio: f64) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) || n == 0 {
            return Err(Error::InvalidArgument(format!("bad grid bounds [{lo}, {hi}] with {n} points")));
        }
        let values = if n == 1 {
            vec![hi]
        } else {
            let step = (hi / lo).ln() / (n - 1) as f64;
            (0..n).map(|i| lo * (step * i as f64).exp()).collect()
        };
        Self::new(values, ratio)
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
}

/// Largest absolute sample correlation between a penalized regressor and a response.
pub fn lambda_scale(data: &Dataset, spec: &ModelSpec) -> Result<f64> {
    let design = Design::new(data, spec)?;
    let n_pen = spec.p * spec.d + spec.q * spec.d_exo;
    let center = |v: DVector<f64>| {
        let m = v.mean();
        let c = v.map(|x| x - m);
        let norm = c.norm();
        (c, norm)
    };
    let ys: Vec<_> = (0..spec.d).map(|j| center(design.y.column(j).into_owned())).collect();
    let mut scale: f64 = 0.0;
    for i in 0..n_pen {
        let (zc, zn) = center(design.z.column(i).into_owned());
        if zn == 0.0 {
            continue;
        }
        for (yc, yn) in &ys {
            if *yn > 0.0 {
                scale = scale.max((zc.dot(yc) / (zn * yn)).abs());
            }
        }
    }
    if !(scale > 0.0) {
        return Err(Error::Data("regressors and responses are uncorrelated or constant".into()));
    }
    Ok(scale)
}

/// Ten log-spaced levels over `[0.01, 1] · lambda_scale`, precision ratio 1.
pub fn default_grid(data: &Dataset, spec: &ModelSpec) -> Result<TuningGrid> {
    let scale = lambda_scale(data, spec)?;
    TuningGrid::log_spaced(0.01 * scale, scale, 10, 1.0)
}

/// `Σ_t Σ_m γ_t(m) ‖y_t − Ĉ(m)ᵀ z_t‖²`.
pub fn pooled_ssr(fit: &FitResult, data: &Dataset) -> Result<f64> {
    let design = Design::new(data, fit.model.spec())?;
    if fit.smoothed.n_steps() != design.n_usable() {
        return Err(Error::Dimension("fit and data have different sample sizes".into()));
    }
    let mut total = 0.0;
    for (s, r) in fit.model.regimes().iter().enumerate() {
        let resid = design.residuals(r.coef());
        for (t, row) in resid.row_iter().enumerate() {
            total += fit.smoothed.gamma[(t, s)] * row.norm_squared();
        }
    }
    Ok(total)
}

/// `Σ_t Σ_m γ_t(m) e_t(m) e_t(m)ᵀ / T` with `e_t(m) = y_t − Ĉ(m)ᵀ z_t`.
pub fn pooled_residual_covariance(fit: &FitResult, data: &Dataset) -> Result<DMatrix<f64>> {
    let design = Design::new(data, fit.model.spec())?;
    let n = design.n_usable();
    if fit.smoothed.n_steps() != n {
        return Err(Error::Dimension("fit and data have different sample sizes".into()));
    }
    let d = fit.model.spec().d;
    let mut cov = DMatrix::zeros(d, d);
    for (s, r) in fit.model.regimes().iter().enumerate() {
        let resid = design.residuals(r.coef());
        let weights = fit.smoothed.gamma.column(s);
        let weighted = DMatrix::from_fn(n, d, |t, j| weights[t] * resid[(t, j)]);
        cov += resid.transpose() * weighted;
    }
    Ok(cov / n as f64)
}

/// Nonzero estimates among the `K_T` counted parameters (initial distribution excluded).
pub fn count_nonzero(fit: &FitResult) -> usize {
    flatten(&fit.model)
        .iter()
        .filter(|(slot, v)| slot.block != Block::Initial && v.abs() > NONZERO_TOL)
        .count()
}

/// `log(ssr) + log(k_t) · l · log(t) / t`.
pub fn bic_value(ssr: f64, k_t: usize, l: usize, t: usize) -> Result<f64> {
    if !(ssr > 0.0) || !ssr.is_finite() {
        return Err(Error::Numerical(format!("pooled SSR {ssr} must be positive for the BIC")));
    }
    bic_from_log(ssr.ln(), k_t, l, t)
}

fn bic_from_log(log_fit: f64, k_t: usize, l: usize, t: usize) -> Result<f64> {
    if k_t == 0 || t < 2 {
        return Err(Error::InvalidArgument("BIC needs K_T >= 1 and T >= 2".into()));
    }
    let t = t as f64;
    Ok(log_fit + (k_t as f64).ln() * l as f64 * t.ln() / t)
}

/// BIC of a fit using the log-determinant fit term, `T` the usable sample size.
pub fn bic(fit: &FitResult, data: &Dataset) -> Result<f64> {
    let cov = pooled_residual_covariance(fit, data)?;
    let log_fit = logdet_spd(&cov)
        .map_err(|_| Error::Numerical("pooled residual covariance is singular".into()))?;
    bic_from_log(log_fit, count_params(fit.model.spec()), count_nonzero(fit), fit.smoothed.n_steps())
}

/// BIC with the scalar squared-norm SSR as the fit term.
pub fn bic_squared_norm(fit: &FitResult, data: &Dataset) -> Result<f64> {
    bic_value(pooled_ssr(fit, data)?, count_params(fit.model.spec()), count_nonzero(fit), fit.smoothed.n_steps())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub lambda_coef: f64,
    pub lambda_prec: f64,
    pub bic: f64,
    pub bic_squared_norm: f64,
    pub pooled_ssr: f64,
    pub nonzero: usize,
    pub objective: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub family: PenaltyFamily,
    pub best: FitResult,
    pub best_index: usize,
    /// One row per grid point, in grid order; failed fits are absent.
    pub table: Vec<BicRow>,
}

fn row_for(fit: &FitResult, data: &Dataset) -> Result<BicRow> {
    Ok(BicRow {
        lambda_coef: fit.penalty.lambda_coef,
        lambda_prec: fit.penalty.lambda_prec,
        bic: bic(fit, data)?,
        bic_squared_norm: bic_squared_norm(fit, data)?,
        pooled_ssr: pooled_ssr(fit, data)?,
        nonzero: count_nonzero(fit),
        objective: fit.objective(),
        converged: fit.converged,
    })
}

/// Seed of grid point `i`, so each point's restarts are reproducible on their own.
fn point_options(opts: &EmOptions, i: usize) -> EmOptions {
    EmOptions { seed: opts.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)), ..opts.clone() }
}

fn select(family: PenaltyFamily, fits: Vec<(usize, Result<FitResult>)>, data: &Dataset) -> Result<TuneResult> {
    let mut table = Vec::new();
    let mut best: Option<(f64, usize, FitResult)> = None;
    let mut last_err = None;
    for (i, fit) in fits {
        match fit.and_then(|f| row_for(&f, data).map(|row| (f, row))) {
            Ok((fit, row)) => {
                // grid is descending, so strict improvement keeps the larger λ on ties
                if best.as_ref().map_or(true, |(b, _, _)| row.bic < *b) {
                    best = Some((row.bic, i, fit));
                }
                table.push(row);
            }
            Err(e) => {
                log::warn!("grid point {i} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    let (_, best_index, best) = best.ok_or_else(|| Error::AllRestartsFailed {
        restarts: 0,
        last: last_err.map(|e| e.to_string()).unwrap_or_default(),
    })?;
    Ok(TuneResult { family, best, best_index, table })
}

/// Lasso path over a descending grid: at each point the better of a cold
/// multi-start fit and a chain warm-started from the previous point's fit.
pub fn tune_lasso(data: &Dataset, spec: &ModelSpec, grid: &TuningGrid, opts: &EmOptions) -> Result<TuneResult> {
    let mut fits = Vec::new();
    let mut previous: Option<FitResult> = None;
    for (i, &lambda) in grid.lambdas().iter().enumerate() {
        let penalty = PenaltyConfig::lasso(lambda, grid.ratio * lambda);
        let point = point_options(opts, i);
        let cold = em_fit(data, spec, &penalty, &point);
        let warm = previous.as_ref().map(|p| em_from(data, &p.model, &penalty, &point));
        let chosen = match (cold, warm) {
            (Ok(c), Some(Ok(w))) => Ok(if w.objective() > c.objective() { w } else { c }),
            (Ok(c), _) => Ok(c),
            (Err(_), Some(Ok(w))) => Ok(w),
            (Err(e), _) => Err(e),
        };
        if let Ok(f) = &chosen {
            previous = Some(f.clone());
        }
        fits.push((i, chosen));
    }
    select(PenaltyFamily::Lasso, fits, data)
}

/// SCAD over the grid, with LLA weights always taken from the same Lasso fit
/// and each EM chain started at that fit.
pub fn tune_scad(data: &Dataset, grid: &TuningGrid, lasso: &FitResult, opts: &EmOptions) -> Result<TuneResult> {
    let initial = flatten(&lasso.model);
    let fits = grid
        .lambdas()
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let fit = lla_weights(&initial, lambda, grid.ratio * lambda, DEFAULT_SCAD_A).and_then(|w| {
                let penalty = PenaltyConfig::scad(lambda, grid.ratio * lambda, DEFAULT_SCAD_A, w);
                em_from(data, &lasso.model, &penalty, &point_options(opts, i))
            });
            (i, fit)
        })
        .collect();
    select(PenaltyFamily::ScadLla, fits, data)
}

/// Dispatches on the family; SCAD first tunes the Lasso to get its initial estimate.
pub fn tune(
    data: &Dataset,
    spec: &ModelSpec,
    family: PenaltyFamily,
    grid: &TuningGrid,
    opts: &EmOptions,
) -> Result<TuneResult> {
    let lasso = tune_lasso(data, spec, grid, opts)?;
    match family {
        PenaltyFamily::Lasso => Ok(lasso),
        PenaltyFamily::ScadLla => tune_scad(data, grid, &lasso.best, opts),
    }
}

/// Writes the BIC table as CSV.
pub fn write_bic_table<W: Write>(table: &[BicRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda_coef", "lambda_prec", "bic", "bic_squared_norm", "pooled_ssr", "nonzero", "objective", "converged"])?;
    for r in table {
        w.write_record([
            format!("{:.16e}", r.lambda_coef),
            format!("{:.16e}", r.lambda_prec),
            format!("{:.16e}", r.bic),
            format!("{:.16e}", r.bic_squared_norm),
            format!("{:.16e}", r.pooled_ssr),
            r.nonzero.to_string(),
            format!("{:.16e}", r.objective),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
