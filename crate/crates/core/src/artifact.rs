//! JSON fit artifacts and atomic file output.
//!
//! A fit artifact holds the model matrices as row-major nested arrays:
//!
//! ```text
//! {
//!   "schema": "msvar-fit/1",
//!   "spec": { "n_states", "p", "q", "d", "d_exo", "intercept" },
//!   "y_labels": [..], "x_labels": [..],
//!   "penalty": { "family", "lambda_coef", "lambda_prec", "a" },
//!   "regimes": [ { "own_lags": [[[..]]], "exo_lags": [[[..]]],
//!                  "intercept": [..] | null, "precision": [[..]], "covariance": [[..]] } ],
//!   "transition": [[..]], "initial": [..],
//!   "support": [..], "objective_trace": [..],
//!   "objective", "loglik", "converged", "bic": number | null
//! }
//! ```
//!
//! `support` lists flat-layout indices of nonzero penalized parameters.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, MsVarModel, RegimeParams};
use crate::penalties::PenaltyFamily;

pub const FIT_SCHEMA: &str = "msvar-fit/1";

type Rows = Vec<Vec<f64>>;

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &Rows, nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Data(format!("{what} must be {nrows} × {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySummary {
    pub family: PenaltyFamily,
    pub lambda_coef: f64,
    pub lambda_prec: f64,
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeArtifact {
    pub own_lags: Vec<Rows>,
    pub exo_lags: Vec<Rows>,
    pub intercept: Option<Vec<f64>>,
    pub precision: Rows,
    pub covariance: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub schema: String,
    pub spec: ModelSpec,
    pub y_labels: Vec<String>,
    pub x_labels: Vec<String>,
    pub penalty: PenaltySummary,
    pub regimes: Vec<RegimeArtifact>,
    pub transition: Rows,
    pub initial: Vec<f64>,
    pub support: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub objective: f64,
    pub loglik: f64,
    pub converged: bool,
    pub bic: Option<f64>,
}

impl FitArtifact {
    pub fn new(fit: &FitResult, data: &Dataset, bic: Option<f64>) -> Self {
        let spec = *fit.model.spec();
        let regimes = fit
            .model
            .regimes()
            .iter()
            .map(|r| RegimeArtifact {
                own_lags: (0..spec.p).map(|j| rows(&r.own_lag(&spec, j))).collect(),
                exo_lags: (0..spec.q).map(|j| rows(&r.exo_lag(&spec, j))).collect(),
                intercept: r.intercept(&spec).map(|c| c.iter().copied().collect()),
                precision: rows(r.precision()),
                covariance: rows(&r.covariance()),
            })
            .collect();
        Self {
            schema: FIT_SCHEMA.to_string(),
            spec,
            y_labels: data.y_labels().to_vec(),
            x_labels: data.x_labels().to_vec(),
            penalty: PenaltySummary {
                family: fit.penalty.family,
                lambda_coef: fit.penalty.lambda_coef,
                lambda_prec: fit.penalty.lambda_prec,
                a: fit.penalty.a,
            },
            regimes,
            transition: rows(fit.model.trans()),
            initial: fit.model.init().iter().copied().collect(),
            support: fit.support(),
            objective_trace: fit.objective_trace.clone(),
            objective: fit.objective(),
            loglik: fit.loglik(),
            converged: fit.converged,
            bic,
        }
    }

    /// Rebuilds the model stored in the artifact.
    pub fn model(&self) -> Result<MsVarModel> {
        if self.schema != FIT_SCHEMA {
            return Err(Error::Data(format!("unsupported fit schema \"{}\"", self.schema)));
        }
        let spec = self.spec;
        spec.validate()?;
        if self.regimes.len() != spec.n_states {
            return Err(Error::Data("regime count does not match spec".into()));
        }
        let regimes = self
            .regimes
            .iter()
            .map(|r| {
                let own = r.own_lags.iter().map(|a| matrix(a, spec.d, spec.d, "own lag")).collect::<Result<Vec<_>>>()?;
                let exo = r.exo_lags.iter().map(|b| matrix(b, spec.d, spec.d_exo, "exogenous lag")).collect::<Result<Vec<_>>>()?;
                let intercept = r.intercept.as_ref().map(|c| DVector::from_vec(c.clone()));
                RegimeParams::from_blocks(&spec, &own, &exo, intercept.as_ref(), matrix(&r.precision, spec.d, spec.d, "precision")?)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = spec.n_states;
        MsVarModel::new(spec, regimes, matrix(&self.transition, m, m, "transition")?, DVector::from_vec(self.initial.clone()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Builds output in memory with `fill` and writes it atomically.
pub fn write_with(path: impl AsRef<Path>, fill: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    fill(&mut buf)?;
    write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{em_fit, EmOptions};
    use crate::penalties::PenaltyConfig;
    use crate::simulate::{random_stable_model, simulate_msvar};

    #[test]
    fn artifact_round_trip() {
        let spec = ModelSpec::new(2, 2, 3).with_intercept(true);
        let truth = random_stable_model(&spec, 2).unwrap();
        let data = simulate_msvar(&truth, 120, 50, 2).unwrap().data;
        let fit = em_fit(&data, &spec, &PenaltyConfig::lasso(0.05, 0.05), &EmOptions { n_restarts: 1, ..Default::default() }).unwrap();
        let art = FitArtifact::new(&fit, &data, Some(1.5));
        let text = art.to_json().unwrap();
        let back = FitArtifact::from_json(&text).unwrap();
        assert_eq!(back, art);
        assert_eq!(back.model().unwrap(), fit.model);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        // row-major: first row of A_1 in regime 0 is equation 1
        let a = fit.model.regime(0).own_lag(&spec, 0);
        assert_eq!(value["regimes"][0]["own_lags"][0][0][1].as_f64().unwrap(), a[(0, 1)]);
        assert_eq!(value["schema"], FIT_SCHEMA);
    }

    #[test]
    fn rejects_wrong_schema_or_shape() {
        let spec = ModelSpec::new(1, 1, 2);
        let truth = random_stable_model(&spec, 3).unwrap();
        let data = simulate_msvar(&truth, 60, 10, 3).unwrap().data;
        let fit = em_fit(&data, &spec, &PenaltyConfig::unpenalized(), &EmOptions { n_restarts: 1, ..Default::default() }).unwrap();
        let mut art = FitArtifact::new(&fit, &data, None);
        art.schema = "other".into();
        assert!(art.model().is_err());
        art.schema = FIT_SCHEMA.into();
        art.transition = vec![vec![1.0, 0.0]];
        assert!(art.model().is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"old").unwrap();
        write_with(&path, |b| {
            b.extend_from_slice(b"new");
            Ok(())
        })
        .unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"new");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_with(&path, |_| Err(Error::Numerical("boom".into()))).is_err());
        assert_eq!(std::fs::read(&path).unwrap(), b"new");
    }
}
