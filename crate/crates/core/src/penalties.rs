//! Lasso and SCAD-LLA penalties.
//!
//! Both families reduce to a weighted ℓ₁ penalty on the VAR coefficients and
//! the unique off-diagonal precision entries. For the Lasso the weights are
//! the constant `λ` and `λ*`; for SCAD they are `p'_λ(|initial value|)`,
//! computed once from a preliminary Lasso estimate. Intercepts, precision
//! diagonals and chain probabilities are never penalized.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_layout, Block, FlatParams, ModelSpec, MsVarModel};

/// Conventional SCAD shape constant.
pub const DEFAULT_SCAD_A: f64 = 3.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyFamily {
    Lasso,
    ScadLla,
}

/// Per-parameter weights of a SCAD-LLA fit.
///
/// `coef` follows the penalized coefficient slots of the flat layout
/// (own lags then exogenous lags, regime by regime, intercepts skipped);
/// `prec` follows the `Q^ND` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlaWeights {
    pub coef: Vec<f64>,
    pub prec: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub family: PenaltyFamily,
    /// `λ` (or `λ^Lasso`) for the VAR coefficients.
    pub lambda_coef: f64,
    /// `λ*` (or `λ^gLasso`) for the off-diagonal precision entries.
    pub lambda_prec: f64,
    /// SCAD shape constant, `a > 2`.
    pub a: f64,
    pub weights: Option<LlaWeights>,
}

impl PenaltyConfig {
    pub fn lasso(lambda_coef: f64, lambda_prec: f64) -> Self {
        Self {
            family: PenaltyFamily::Lasso,
            lambda_coef,
            lambda_prec,
            a: DEFAULT_SCAD_A,
            weights: None,
        }
    }

    /// No penalty at all (plain maximum likelihood).
    pub fn unpenalized() -> Self {
        Self::lasso(0.0, 0.0)
    }

    pub fn scad(lambda: f64, lambda_star: f64, a: f64, weights: LlaWeights) -> Self {
        Self {
            family: PenaltyFamily::ScadLla,
            lambda_coef: lambda,
            lambda_prec: lambda_star,
            a,
            weights: Some(weights),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.lambda_coef >= 0.0 && self.lambda_prec >= 0.0) {
            return Err(Error::InvalidArgument("penalty levels must be nonnegative".into()));
        }
        if !(self.a > 2.0) {
            return Err(Error::InvalidArgument(format!("SCAD constant a = {} must exceed 2", self.a)));
        }
        match (&self.family, &self.weights) {
            (PenaltyFamily::ScadLla, None) => {
                Err(Error::InvalidArgument("SCAD-LLA penalty requires LLA weights".into()))
            }
            (_, Some(w)) => {
                let n_coef = spec.n_states * spec.n_penalized_coefs();
                let n_prec = spec.n_states * spec.d * (spec.d - 1) / 2;
                if w.coef.len() != n_coef || w.prec.len() != n_prec {
                    return Err(Error::Dimension(format!(
                        "LLA weights have lengths ({}, {}), expected ({n_coef}, {n_prec})",
                        w.coef.len(),
                        w.prec.len()
                    )));
                }
                if w.coef.iter().chain(&w.prec).any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidArgument("LLA weights must be nonnegative".into()));
                }
                Ok(())
            }
            (PenaltyFamily::Lasso, None) => Ok(()),
        }
    }

    /// Expands the configuration into per-regime multiplier matrices.
    pub fn resolve(&self, spec: &ModelSpec) -> Result<ResolvedPenalty> {
        self.validate(spec)?;
        let (m, d, k) = (spec.n_states, spec.d, spec.n_regressors());
        let mut coef = vec![DMatrix::zeros(k, d); m];
        let mut prec = vec![DMatrix::zeros(d, d); m];
        let (mut ic, mut ip) = (0, 0);
        for slot in param_layout(spec) {
            let s = slot.state;
            let (cw, pw) = match &self.weights {
                Some(w) if matches!(slot.block, Block::OwnLag | Block::Exogenous) => {
                    ic += 1;
                    (w.coef[ic - 1], 0.0)
                }
                Some(w) if slot.block == Block::PrecisionOffDiag => {
                    ip += 1;
                    (0.0, w.prec[ip - 1])
                }
                _ => (self.lambda_coef, self.lambda_prec),
            };
            match slot.block {
                Block::OwnLag => coef[s][(spec.own_lag_row(slot.lag, slot.col), slot.row)] = cw,
                Block::Exogenous => coef[s][(spec.exo_lag_row(slot.lag, slot.col), slot.row)] = cw,
                Block::PrecisionOffDiag => {
                    prec[s][(slot.row, slot.col)] = pw;
                    prec[s][(slot.col, slot.row)] = pw;
                }
                _ => {}
            }
        }
        Ok(ResolvedPenalty { coef, prec })
    }
}

/// Effective ℓ₁ multipliers: `coef[s]` is `k × d` aligned with the stacked
/// coefficient matrix, `prec[s]` is symmetric `d × d` with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPenalty {
    pub coef: Vec<DMatrix<f64>>,
    pub prec: Vec<DMatrix<f64>>,
}

impl ResolvedPenalty {
    /// Penalty of one regime, counting each symmetric precision pair once.
    pub fn state_value(&self, s: usize, coef: &DMatrix<f64>, precision: &DMatrix<f64>) -> f64 {
        let c: f64 = self.coef[s].iter().zip(coef.iter()).map(|(w, v)| w * v.abs()).sum();
        let d = precision.nrows();
        let mut q = 0.0;
        for col in 0..d {
            for row in col + 1..d {
                q += self.prec[s][(row, col)] * precision[(row, col)].abs();
            }
        }
        c + q
    }

    pub fn value(&self, model: &MsVarModel) -> f64 {
        model
            .regimes()
            .iter()
            .enumerate()
            .map(|(s, r)| self.state_value(s, r.coef(), r.precision()))
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.coef.iter().chain(&self.prec).all(|m| m.iter().all(|&v| v == 0.0))
    }
}

/// SCAD derivative `p'_λ(x) = λ[1(x ≤ λ) + (aλ − x)₊ / ((a − 1)λ) · 1(x > λ)]`.
pub fn scad_deriv(x: f64, lambda: f64, a: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidArgument(format!("SCAD derivative needs x >= 0, got {x}")));
    }
    if !(lambda >= 0.0) || !(a > 2.0) {
        return Err(Error::InvalidArgument("SCAD derivative needs λ >= 0 and a > 2".into()));
    }
    if x <= lambda {
        Ok(lambda)
    } else {
        Ok((a * lambda - x).max(0.0) / (a - 1.0))
    }
}

/// LLA weights `p'_λ(|ã|)` and `p'_{λ*}(|q̃|)` from an initial estimate.
pub fn lla_weights(initial: &FlatParams, lambda: f64, lambda_star: f64, a: f64) -> Result<LlaWeights> {
    let mut coef = Vec::new();
    let mut prec = Vec::new();
    for (slot, v) in initial.iter() {
        match slot.block {
            Block::OwnLag | Block::Exogenous => coef.push(scad_deriv(v.abs(), lambda, a)?),
            Block::PrecisionOffDiag => prec.push(scad_deriv(v.abs(), lambda_star, a)?),
            _ => {}
        }
    }
    Ok(LlaWeights { coef, prec })
}

/// Full-layout view of LLA weights: zero on every unpenalized slot.
pub fn weights_on_layout(spec: &ModelSpec, w: &LlaWeights) -> Vec<f64> {
    let (mut ic, mut ip) = (0, 0);
    param_layout(spec)
        .iter()
        .map(|slot| match slot.block {
            Block::OwnLag | Block::Exogenous => {
                ic += 1;
                w.coef[ic - 1]
            }
            Block::PrecisionOffDiag => {
                ip += 1;
                w.prec[ip - 1]
            }
            _ => 0.0,
        })
        .collect()
}

/// Penalty term subtracted from `T⁻¹ log 𝓛`.
pub fn penalty_value(model: &MsVarModel, config: &PenaltyConfig) -> Result<f64> {
    Ok(config.resolve(model.spec())?.value(model))
}
