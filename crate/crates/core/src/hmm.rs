//! Gaussian emission densities and forward-backward smoothing.
//!
//! The filter works on rescaled probabilities: at each step the emission
//! log-densities are shifted by their maximum before exponentiation and the
//! predictive mass is renormalized, with the log normalizers accumulated into
//! the log-likelihood. Nothing underflows even for long samples with
//! high-dimensional densities.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `½ log|Q| − (d/2) log 2π − ½ ωᵀ Q ω`.
pub fn gaussian_logdensity(omega: &DVector<f64>, precision: &DMatrix<f64>) -> Result<f64> {
    GaussianKernel::new(precision)?.logdensity(omega)
}

/// Cached Cholesky factor for repeated density evaluation under one precision.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    /// Lower factor `L` with `Q = L Lᵀ`.
    chol_l: DMatrix<f64>,
    constant: f64,
}

impl GaussianKernel {
    pub fn new(precision: &DMatrix<f64>) -> Result<Self> {
        let chol = linalg::cholesky(precision, "emission precision")?;
        let d = precision.nrows() as f64;
        let chol_l = chol.unpack();
        let half_logdet: f64 = chol_l.diagonal().iter().map(|v| v.ln()).sum();
        Ok(Self { chol_l, constant: half_logdet - 0.5 * d * LN_2PI })
    }

    pub fn logdensity(&self, omega: &DVector<f64>) -> Result<f64> {
        if omega.len() != self.chol_l.nrows() {
            return Err(Error::Dimension("residual length does not match precision".into()));
        }
        let w = self.chol_l.tr_mul(omega);
        Ok(self.constant - 0.5 * w.norm_squared())
    }

    /// Log-densities of every row of an `n × d` residual matrix.
    pub fn logdensity_rows(&self, residuals: &DMatrix<f64>) -> DVector<f64> {
        let w = residuals * &self.chol_l;
        DVector::from_iterator(
            w.nrows(),
            w.row_iter().map(|r| self.constant - 0.5 * r.norm_squared()),
        )
    }
}

/// Output of the forward recursion.
#[derive(Debug, Clone)]
pub struct Filtered {
    /// `P(S_t = s | ℐ_t)`, one row per usable time step.
    pub filtered: DMatrix<f64>,
    /// `P(S_t = s | ℐ_{t−1})`; row 0 is the initial distribution.
    pub predicted: DMatrix<f64>,
    pub loglik: f64,
}

impl Filtered {
    /// `P(S_{T+1} = s | ℐ_T)`.
    pub fn next_state_probs(&self, trans: &DMatrix<f64>) -> DVector<f64> {
        let last = self.filtered.row(self.filtered.nrows() - 1);
        (last * trans).transpose()
    }
}

fn check_chain(logdens: &DMatrix<f64>, trans: &DMatrix<f64>, init: &DVector<f64>) -> Result<()> {
    let m = logdens.ncols();
    if trans.shape() != (m, m) || init.len() != m {
        return Err(Error::Dimension("chain parameters do not match state count".into()));
    }
    if logdens.nrows() == 0 {
        return Err(Error::InvalidArgument("no usable observations".into()));
    }
    if logdens.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numerical("log-densities must be finite".into()));
    }
    Ok(())
}

/// Forward (Hamilton) filter over a `(T−L) × M` matrix of emission log-densities.
pub fn forward_filter(
    logdens: &DMatrix<f64>,
    trans: &DMatrix<f64>,
    init: &DVector<f64>,
) -> Result<Filtered> {
    check_chain(logdens, trans, init)?;
    let (n, m) = logdens.shape();
    let mut filtered = DMatrix::zeros(n, m);
    let mut predicted = DMatrix::zeros(n, m);
    let mut loglik = 0.0;
    let mut pred: Vec<f64> = init.iter().copied().collect();
    let mut joint = vec![0.0; m];
    for t in 0..n {
        let row = logdens.row(t);
        let shift = row.max();
        if !shift.is_finite() {
            return Err(Error::FilterCollapse { t });
        }
        let mut mass = 0.0;
        for s in 0..m {
            joint[s] = pred[s] * (row[s] - shift).exp();
            mass += joint[s];
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::FilterCollapse { t });
        }
        loglik += shift + mass.ln();
        for s in 0..m {
            predicted[(t, s)] = pred[s];
            filtered[(t, s)] = joint[s] / mass;
        }
        for (s2, p) in pred.iter_mut().enumerate() {
            *p = (0..m).map(|s1| filtered[(t, s1)] * trans[(s1, s2)]).sum();
        }
    }
    Ok(Filtered { filtered, predicted, loglik })
}

/// Smoothed regime probabilities from the forward-backward recursion.
#[derive(Debug, Clone)]
pub struct SmoothedState {
    /// `(T−L) × M`, `γ_t(s) = P(S_t = s | ℐ_T)`.
    pub gamma: DMatrix<f64>,
    /// `T−L−1` slices; `xi[t][(s, s')] = P(S_t = s, S_{t+1} = s' | ℐ_T)`.
    pub xi: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

impl SmoothedState {
    pub fn n_steps(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.gamma.ncols()
    }

    /// Total smoothed weight `Σ_t γ_t(s)` of each regime.
    pub fn state_weights(&self) -> DVector<f64> {
        self.gamma.row_sum().transpose()
    }

    /// Largest violation of the row-sum, slice-sum and marginalization identities.
    pub fn max_invariant_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for row in self.gamma.row_iter() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
        for (t, x) in self.xi.iter().enumerate() {
            worst = worst.max((x.sum() - 1.0).abs());
            for s in 0..self.n_states() {
                worst = worst.max((x.row(s).sum() - self.gamma[(t, s)]).abs());
                worst = worst.max((x.column(s).sum() - self.gamma[(t + 1, s)]).abs());
            }
        }
        worst
    }
}

/// Forward filter followed by the backward smoothing pass.
pub fn smooth(logdens: &DMatrix<f64>, trans: &DMatrix<f64>, init: &DVector<f64>) -> Result<SmoothedState> {
    let f = forward_filter(logdens, trans, init)?;
    let (n, m) = logdens.shape();
    let mut gamma = DMatrix::zeros(n, m);
    gamma.set_row(n - 1, &f.filtered.row(n - 1));
    let mut xi = vec![DMatrix::zeros(m, m); n.saturating_sub(1)];
    let mut ratio = vec![0.0; m];
    for t in (0..n.saturating_sub(1)).rev() {
        for s2 in 0..m {
            let pred = f.predicted[(t + 1, s2)];
            ratio[s2] = if pred > 0.0 { gamma[(t + 1, s2)] / pred } else { 0.0 };
        }
        let slice = &mut xi[t];
        for s1 in 0..m {
            let a = f.filtered[(t, s1)];
            let mut total = 0.0;
            for s2 in 0..m {
                let v = a * trans[(s1, s2)] * ratio[s2];
                slice[(s1, s2)] = v;
                total += v;
            }
            gamma[(t, s1)] = total;
        }
    }
    Ok(SmoothedState { gamma, xi, loglik: f.loglik })
}
