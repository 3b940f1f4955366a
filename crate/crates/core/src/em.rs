//! EM estimation of penalized MS-VARs.
//!
//! The objective is `T⁻¹ log 𝓛 − penalty`, with `T` the number of usable
//! observations. Each M-step is a pair of conditional maximizations per
//! regime: the precision matrix given the current coefficients (graphical
//! lasso), then the coefficients given the new precision (weighted lasso).
//! Rescaled to the per-regime form `log|Q| − tr(ŜQ)`, the penalty levels
//! become `T / n_s` times the configured ones, where `n_s = Σ_t γ_t(s)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glasso::{glasso_objective, glasso_solve, GlassoProblem};
use crate::hmm::{smooth, GaussianKernel, SmoothedState};
use crate::linalg::{inverse_spd, symmetrize};
use crate::model::{flatten, Dataset, Design, ModelSpec, MsVarModel, RegimeParams};
use crate::penalties::{lla_weights, PenaltyConfig, ResolvedPenalty};
use crate::regression::{coef_objective, coef_update, RegressionStats};
use crate::simulate::stream_rng;

/// Restart streams beyond the first `n_restarts` are used to replace collapsed chains.
const MAX_ATTEMPTS_PER_RESTART: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when the objective changes by less than `rel_tol · max(|obj|, 1)`.
    pub rel_tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    /// A regime with `Σ_t γ_t(s) < collapse_floor · T` triggers a restart.
    pub collapse_floor: f64,
    /// Tolerance and sweep cap of the coefficient solver.
    pub coef_tol: f64,
    pub coef_max_sweeps: usize,
    /// Tolerance and sweep cap of the graphical lasso.
    pub glasso_tol: f64,
    pub glasso_max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-6,
            n_restarts: 5,
            seed: 0,
            collapse_floor: 1e-8,
            coef_tol: crate::regression::DEFAULT_TOL,
            coef_max_sweeps: crate::regression::DEFAULT_MAX_SWEEPS,
            glasso_tol: crate::glasso::DEFAULT_TOL,
            glasso_max_iter: crate::glasso::DEFAULT_MAX_ITER,
        }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.n_restarts == 0 {
            return Err(Error::InvalidArgument("max_iter and n_restarts must be positive".into()));
        }
        if !(self.rel_tol > 0.0 && self.collapse_floor > 0.0 && self.coef_tol > 0.0 && self.glasso_tol > 0.0) {
            return Err(Error::InvalidArgument("EM tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: MsVarModel,
    /// Penalized objective after each E-step; the last entry belongs to `model`.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub smoothed: SmoothedState,
    pub penalty: PenaltyConfig,
    pub options: EmOptions,
    /// Restart that produced this fit (`None` when started from a given model).
    pub restart: Option<usize>,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }

    pub fn loglik(&self) -> f64 {
        self.smoothed.loglik
    }

    pub fn iterations(&self) -> usize {
        self.objective_trace.len()
    }

    /// Flat-layout indices of nonzero penalized parameters.
    pub fn support(&self) -> Vec<usize> {
        flatten(&self.model)
            .iter()
            .enumerate()
            .filter(|(_, (slot, v))| slot.block.is_penalized() && *v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Prepared data and penalty shared by every chain of one fit.
struct Problem {
    design: Design,
    penalty: ResolvedPenalty,
    config: PenaltyConfig,
    spec: ModelSpec,
    opts: EmOptions,
}

impl Problem {
    fn new(data: &Dataset, spec: &ModelSpec, penalty: &PenaltyConfig, opts: &EmOptions) -> Result<Self> {
        opts.validate()?;
        spec.check_data(data)?;
        if data.n_obs() <= spec.max_lag() + 10 {
            return Err(Error::InvalidArgument(format!(
                "sample size {} must exceed the largest lag plus 10 ({})",
                data.n_obs(),
                spec.max_lag() + 10
            )));
        }
        Ok(Self {
            design: Design::new(data, spec)?,
            penalty: penalty.resolve(spec)?,
            config: penalty.clone(),
            spec: *spec,
            opts: opts.clone(),
        })
    }

    fn n(&self) -> f64 {
        self.design.n_usable() as f64
    }

    fn e_step(&self, model: &MsVarModel) -> Result<(SmoothedState, f64)> {
        let smoothed = smooth_design(&self.design, model)?;
        let objective = smoothed.loglik / self.n() - self.penalty.value(model);
        Ok((smoothed, objective))
    }

    fn m_step(&self, model: &MsVarModel, smoothed: &SmoothedState) -> Result<MsVarModel> {
        let n = self.n();
        let weights = smoothed.state_weights();
        for (s, &w) in weights.iter().enumerate() {
            if w < self.opts.collapse_floor * n {
                return Err(Error::StateCollapse { state: s, weight: w, floor: self.opts.collapse_floor * n });
            }
        }
        let mut regimes = Vec::with_capacity(self.spec.n_states);
        for (s, old) in model.regimes().iter().enumerate() {
            let gamma = smoothed.gamma.column(s).into_owned();
            let stats = RegressionStats::new(&self.design.y, &self.design.z, &gamma)?;
            let scale = n / stats.weight;

            let scatter = stats.scatter(old.coef());
            let problem = GlassoProblem::new(scatter.clone(), scale)
                .with_weights(self.penalty.prec[s].clone())
                .with_tol(self.opts.glasso_tol, self.opts.glasso_max_iter);
            let sol = glasso_solve(&problem, Some(old.precision()))?;
            // keep the old precision if the solver could not improve on it;
            // a jittered solve is judged against the unjittered scatter
            let old_obj = glasso_objective(old.precision(), &scatter, scale, &problem.weights)?;
            let new_obj = glasso_objective(&sol.precision, &scatter, scale, &problem.weights)?;
            let precision = if new_obj < old_obj {
                old.precision().clone()
            } else {
                sol.precision
            };

            let c = coef_update(
                &stats,
                &precision,
                scale,
                &self.penalty.coef[s],
                Some(old.coef()),
                self.opts.coef_tol,
                self.opts.coef_max_sweeps,
            )?;
            let coef = if coef_objective(&stats, &c.coef, &precision, scale, &self.penalty.coef[s])
                > coef_objective(&stats, old.coef(), &precision, scale, &self.penalty.coef[s])
            {
                old.coef().clone()
            } else {
                c.coef
            };
            regimes.push(RegimeParams::new(&self.spec, coef, precision)?);
        }
        let (trans, init) = update_transition(&smoothed.xi, &smoothed.gamma)?;
        MsVarModel::new(self.spec, regimes, trans, init)
    }

    fn run_chain(&self, start: MsVarModel, restart: Option<usize>) -> Result<FitResult> {
        let mut model = start;
        let mut trace = Vec::new();
        let mut converged = false;
        let (mut smoothed, mut obj) = self.e_step(&model)?;
        trace.push(obj);
        for _ in 1..self.opts.max_iter {
            let next = self.m_step(&model, &smoothed)?;
            let (next_smoothed, next_obj) = self.e_step(&next)?;
            let done = (next_obj - obj).abs() < self.opts.rel_tol * next_obj.abs().max(1.0);
            model = next;
            smoothed = next_smoothed;
            obj = next_obj;
            trace.push(obj);
            if done {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("EM stopped after {} iterations without converging", self.opts.max_iter);
        }
        Ok(FitResult {
            model,
            objective_trace: trace,
            converged,
            smoothed,
            penalty: self.config.clone(),
            options: self.opts.clone(),
            restart,
        })
    }

    /// Randomized start around a pooled ridge fit.
    fn initial_model(&self, stream: u64) -> Result<MsVarModel> {
        let spec = &self.spec;
        let (k, d, m) = (spec.n_regressors(), spec.d, spec.n_states);
        let ones = DVector::from_element(self.design.n_usable(), 1.0);
        let pooled = RegressionStats::new(&self.design.y, &self.design.z, &ones)?;
        let ridge = &pooled.gram + DMatrix::identity(k, k) * 1e-3;
        let c0 = ridge
            .cholesky()
            .ok_or_else(|| Error::Numerical("pooled ridge system is singular".into()))?
            .solve(&pooled.cross);
        let mean = c0.mean();
        let sd = (c0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c0.len() as f64).sqrt();
        let sd = 0.25 * if sd > 0.0 { sd } else { 1.0 };

        let s0 = pooled.scatter(&c0);
        let jitter = 1e-8 * s0.trace().max(f64::MIN_POSITIVE) / d as f64;
        let q0 = inverse_spd(&symmetrize(&(s0 + DMatrix::identity(d, d) * jitter)))?;

        let mut rng = stream_rng(self.opts.seed, stream);
        let regimes = (0..m)
            .map(|_| {
                let noise = DMatrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal) * sd);
                RegimeParams::new(spec, &c0 + noise, q0.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        MsVarModel::new(*spec, regimes, default_transition(m), DVector::from_element(m, 1.0 / m as f64))
    }

    fn fit_restarts(&self) -> Result<FitResult> {
        let n_restarts = self.opts.n_restarts;
        let outcomes: Vec<Result<FitResult>> = (0..n_restarts)
            .into_par_iter()
            .map(|r| {
                let mut last = None;
                for attempt in 0..MAX_ATTEMPTS_PER_RESTART {
                    let stream = r as u64 + attempt * n_restarts as u64;
                    match self.initial_model(stream).and_then(|m0| self.run_chain(m0, Some(r))) {
                        Ok(fit) => return Ok(fit),
                        Err(e) => {
                            log::debug!("restart {r} attempt {attempt} failed: {e}");
                            last = Some(e);
                        }
                    }
                }
                Err(last.expect("at least one attempt"))
            })
            .collect();
        pick_best(outcomes, n_restarts)
    }
}

fn pick_best(outcomes: Vec<Result<FitResult>>, n: usize) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for outcome in outcomes {
        match outcome {
            Ok(fit) => {
                if best.as_ref().map_or(true, |b| fit.objective() > b.objective()) {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| Error::AllRestartsFailed {
        restarts: n,
        last: last_err.map(|e| e.to_string()).unwrap_or_default(),
    })
}

/// 0.8 on the diagonal, the rest spread evenly.
pub fn default_transition(m: usize) -> DMatrix<f64> {
    if m == 1 {
        return DMatrix::identity(1, 1);
    }
    DMatrix::from_fn(m, m, |i, j| if i == j { 0.8 } else { 0.2 / (m - 1) as f64 })
}

fn smooth_design(design: &Design, model: &MsVarModel) -> Result<SmoothedState> {
    let mut logdens = DMatrix::zeros(design.n_usable(), model.spec().n_states);
    for (s, r) in model.regimes().iter().enumerate() {
        let kernel = GaussianKernel::new(r.precision())?;
        logdens.set_column(s, &kernel.logdensity_rows(&design.residuals(r.coef())));
    }
    smooth(&logdens, model.trans(), model.init())
}

/// Penalized objective `T⁻¹ log 𝓛 − penalty` of a given model.
pub fn penalized_objective(data: &Dataset, model: &MsVarModel, penalty: &PenaltyConfig) -> Result<f64> {
    let design = Design::new(data, model.spec())?;
    if design.n_usable() == 0 {
        return Err(Error::Data("no usable observations".into()));
    }
    let smoothed = smooth_design(&design, model)?;
    Ok(smoothed.loglik / design.n_usable() as f64 - penalty.resolve(model.spec())?.value(model))
}

/// Smoothed probabilities of a model on a dataset.
pub fn smoothed_states(data: &Dataset, model: &MsVarModel) -> Result<SmoothedState> {
    let design = Design::new(data, model.spec())?;
    if design.n_usable() == 0 {
        return Err(Error::Data("no usable observations".into()));
    }
    smooth_design(&design, model)
}

/// Runs EM from `opts.n_restarts` random starts and returns the best fit.
pub fn em_fit(data: &Dataset, spec: &ModelSpec, penalty: &PenaltyConfig, opts: &EmOptions) -> Result<FitResult> {
    Problem::new(data, spec, penalty, opts)?.fit_restarts()
}

/// Runs a single EM chain from a given starting model.
pub fn em_from(data: &Dataset, start: &MsVarModel, penalty: &PenaltyConfig, opts: &EmOptions) -> Result<FitResult> {
    Problem::new(data, start.spec(), penalty, opts)?.run_chain(start.clone(), None)
}

/// `p̂_{i→j} = Σ_t ξ_t(i, j) / Σ_t γ_{t−1}(i)` and the initial distribution `γ` at the first usable time.
pub fn update_transition(xi: &[DMatrix<f64>], gamma: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = gamma.ncols();
    if gamma.nrows() == 0 || xi.len() + 1 != gamma.nrows() {
        return Err(Error::Dimension(format!("{} pair slices for {} time steps", xi.len(), gamma.nrows())));
    }
    let mut counts = DMatrix::zeros(m, m);
    for x in xi {
        counts += x;
    }
    let mut trans = DMatrix::zeros(m, m);
    for i in 0..m {
        let total: f64 = counts.row(i).sum();
        if total > 0.0 {
            trans.set_row(i, &(counts.row(i) / total));
        } else {
            log::warn!("state {i} has no smoothed transitions; using a uniform row");
            trans.row_mut(i).fill(1.0 / m as f64);
        }
    }
    let first = gamma.row(0);
    let init = DVector::from_fn(m, |s, _| first[s].max(0.0)) / first.iter().map(|v| v.max(0.0)).sum::<f64>();
    Ok((trans, init))
}

/// Lasso estimate with unit weights.
pub fn fit_lasso(
    data: &Dataset,
    spec: &ModelSpec,
    lambda_lasso: f64,
    lambda_glasso: f64,
    opts: &EmOptions,
) -> Result<FitResult> {
    em_fit(data, spec, &PenaltyConfig::lasso(lambda_lasso, lambda_glasso), opts)
}

/// One-step LLA SCAD estimate started from (and weighted by) a Lasso fit.
pub fn fit_scad(
    data: &Dataset,
    lambda: f64,
    lambda_star: f64,
    a: f64,
    initial: &FitResult,
    opts: &EmOptions,
) -> Result<FitResult> {
    let weights = lla_weights(&flatten(&initial.model), lambda, lambda_star, a)?;
    em_from(data, &initial.model, &PenaltyConfig::scad(lambda, lambda_star, a, weights), opts)
}
