//! Domain types for the Markov-switching VAR.
//!
//! A regime's dynamics are stored as one stacked coefficient matrix `coef`
//! of shape `k × d`, where row `i` multiplies regressor `i` of
//!
//! ```text
//! z_t = [y_{t-1}, …, y_{t-p}, x_{t-1}, …, x_{t-q}, 1]
//! ```
//!
//! (the trailing one only when the intercept is enabled). The fitted value of
//! `y_t` in that regime is `coefᵀ z_t`, so the own-lag matrix `A_j` is the
//! transpose of rows `(j-1)·d .. j·d`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on row sums of stochastic matrices and symmetry of precisions.
pub const STOCHASTIC_TOL: f64 = 1e-10;
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Endogenous and exogenous observations, stored row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    y_labels: Vec<String>,
    x_labels: Vec<String>,
    index: Option<Vec<String>>,
}

impl Dataset {
    /// Builds a dataset from `T × d` endogenous and `T × d*` exogenous blocks.
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.ncols() == 0 {
            return Err(Error::Dimension("at least one endogenous series is required".into()));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::Dimension(format!(
                "endogenous block has {} rows but exogenous block has {}",
                y.nrows(),
                x.nrows()
            )));
        }
        if let Some(pos) = y.iter().chain(x.iter()).position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite observation at flat position {pos}")));
        }
        let y_labels = (1..=y.ncols()).map(|i| format!("y{i}")).collect();
        let x_labels = (1..=x.ncols()).map(|i| format!("x{i}")).collect();
        Ok(Self { y, x, y_labels, x_labels, index: None })
    }

    pub fn endogenous(y: DMatrix<f64>) -> Result<Self> {
        let t = y.nrows();
        Self::new(y, DMatrix::zeros(t, 0))
    }

    pub fn with_labels(mut self, y_labels: Vec<String>, x_labels: Vec<String>) -> Result<Self> {
        if y_labels.len() != self.y.ncols() || x_labels.len() != self.x.ncols() {
            return Err(Error::Dimension("label count does not match column count".into()));
        }
        self.y_labels = y_labels;
        self.x_labels = x_labels;
        Ok(self)
    }

    pub fn with_index(mut self, index: Vec<String>) -> Result<Self> {
        if index.len() != self.y.nrows() {
            return Err(Error::Dimension("time index length does not match row count".into()));
        }
        self.index = Some(index);
        Ok(self)
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn n_obs(&self) -> usize {
        self.y.nrows()
    }

    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn exo_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn y_labels(&self) -> &[String] {
        &self.y_labels
    }

    pub fn x_labels(&self) -> &[String] {
        &self.x_labels
    }

    pub fn index(&self) -> Option<&[String]> {
        self.index.as_deref()
    }

    /// The first `rows` observations, as used by expanding-window estimation.
    pub fn prefix(&self, rows: usize) -> Dataset {
        let rows = rows.min(self.n_obs());
        Dataset {
            y: self.y.rows(0, rows).into_owned(),
            x: self.x.rows(0, rows).into_owned(),
            y_labels: self.y_labels.clone(),
            x_labels: self.x_labels.clone(),
            index: self.index.as_ref().map(|ix| ix[..rows].to_vec()),
        }
    }
}

/// Structural dimensions of an MS-VAR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Number of regimes `M`.
    pub n_states: usize,
    /// Endogenous lag order `p`.
    pub p: usize,
    /// Exogenous lag order `q`.
    pub q: usize,
    /// Endogenous dimension `d`.
    pub d: usize,
    /// Exogenous dimension `d*`.
    pub d_exo: usize,
    pub intercept: bool,
}

impl ModelSpec {
    pub fn new(n_states: usize, p: usize, d: usize) -> Self {
        Self { n_states, p, q: 0, d, d_exo: 0, intercept: false }
    }

    pub fn with_exogenous(mut self, d_exo: usize, q: usize) -> Self {
        self.d_exo = d_exo;
        self.q = q;
        self
    }

    pub fn with_intercept(mut self, intercept: bool) -> Self {
        self.intercept = intercept;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::InvalidArgument("regime count must be at least 1".into()));
        }
        if self.p == 0 {
            return Err(Error::InvalidArgument("endogenous lag order must be at least 1".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidArgument("endogenous dimension must be at least 1".into()));
        }
        if self.d_exo == 0 && self.q != 0 {
            return Err(Error::InvalidArgument("exogenous lags require exogenous series".into()));
        }
        Ok(())
    }

    /// Largest lag `L = max(p, q)`; the first `L` rows are presample.
    pub fn max_lag(&self) -> usize {
        self.p.max(self.q)
    }

    /// Length `k` of the stacked regressor vector `z_t`.
    pub fn n_regressors(&self) -> usize {
        self.p * self.d + self.q * self.d_exo + usize::from(self.intercept)
    }

    /// Number of penalizable VAR coefficients per regime (intercept excluded).
    pub fn n_penalized_coefs(&self) -> usize {
        self.p * self.d * self.d + self.q * self.d * self.d_exo
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if data.dim() != self.d || data.exo_dim() != self.d_exo {
            return Err(Error::Dimension(format!(
                "spec expects d = {}, d* = {} but data has {} and {}",
                self.d,
                self.d_exo,
                data.dim(),
                data.exo_dim()
            )));
        }
        if self.max_lag() >= data.n_obs() {
            return Err(Error::InvalidArgument(format!(
                "largest lag {} must be smaller than the sample size {}",
                self.max_lag(),
                data.n_obs()
            )));
        }
        Ok(())
    }

    /// Row of `coef` holding the coefficient on `y_{t-lag-1}[col]`.
    pub(crate) fn own_lag_row(&self, lag: usize, col: usize) -> usize {
        lag * self.d + col
    }

    pub(crate) fn exo_lag_row(&self, lag: usize, col: usize) -> usize {
        self.p * self.d + lag * self.d_exo + col
    }

    pub(crate) fn intercept_row(&self) -> Option<usize> {
        self.intercept.then(|| self.n_regressors() - 1)
    }
}

/// `K_T = M(p d² + q d d* + d(d+1)/2) + M²`, with `d` more slots per regime
/// when an intercept column is carried in the exogenous block.
pub fn count_params(spec: &ModelSpec) -> usize {
    let d = spec.d;
    let per_state =
        spec.p * d * d + spec.q * d * spec.d_exo + usize::from(spec.intercept) * d + d * (d + 1) / 2;
    spec.n_states * per_state + spec.n_states * spec.n_states
}

/// VAR coefficients and innovation precision of one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeParams {
    coef: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl RegimeParams {
    pub fn new(spec: &ModelSpec, coef: DMatrix<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let k = spec.n_regressors();
        if coef.shape() != (k, spec.d) {
            return Err(Error::Dimension(format!(
                "coefficient matrix is {:?}, expected {:?}",
                coef.shape(),
                (k, spec.d)
            )));
        }
        if precision.shape() != (spec.d, spec.d) {
            return Err(Error::Dimension("precision matrix must be d × d".into()));
        }
        if coef.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite VAR coefficient".into()));
        }
        if !linalg::is_symmetric(&precision, SYMMETRY_TOL) {
            return Err(Error::NotPositiveDefinite("precision matrix is not symmetric".into()));
        }
        linalg::cholesky(&precision, "regime precision")?;
        Ok(Self { coef, precision })
    }

    /// Assembles a regime from own-lag matrices `A_1..A_p` (each `d × d`),
    /// exogenous lag matrices `B_1..B_q` (each `d × d*`), an optional
    /// intercept and the precision matrix.
    pub fn from_blocks(
        spec: &ModelSpec,
        own_lags: &[DMatrix<f64>],
        exo_lags: &[DMatrix<f64>],
        intercept: Option<&DVector<f64>>,
        precision: DMatrix<f64>,
    ) -> Result<Self> {
        if own_lags.len() != spec.p || exo_lags.len() != spec.q {
            return Err(Error::Dimension("number of lag matrices does not match spec".into()));
        }
        if intercept.is_some() != spec.intercept {
            return Err(Error::Dimension("intercept presence does not match spec".into()));
        }
        let mut coef = DMatrix::zeros(spec.n_regressors(), spec.d);
        for (j, a) in own_lags.iter().enumerate() {
            if a.shape() != (spec.d, spec.d) {
                return Err(Error::Dimension(format!("A_{} must be d × d", j + 1)));
            }
            for m in 0..spec.d {
                for n in 0..spec.d {
                    coef[(spec.own_lag_row(j, n), m)] = a[(m, n)];
                }
            }
        }
        for (j, b) in exo_lags.iter().enumerate() {
            if b.shape() != (spec.d, spec.d_exo) {
                return Err(Error::Dimension(format!("B_{} must be d × d*", j + 1)));
            }
            for m in 0..spec.d {
                for n in 0..spec.d_exo {
                    coef[(spec.exo_lag_row(j, n), m)] = b[(m, n)];
                }
            }
        }
        if let (Some(c), Some(row)) = (intercept, spec.intercept_row()) {
            if c.len() != spec.d {
                return Err(Error::Dimension("intercept must have length d".into()));
            }
            for m in 0..spec.d {
                coef[(row, m)] = c[m];
            }
        }
        Self::new(spec, coef, precision)
    }

    /// Stacked `k × d` coefficient matrix.
    pub fn coef(&self) -> &DMatrix<f64> {
        &self.coef
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        linalg::inverse_spd(&self.precision).expect("precision validated at construction")
    }

    /// Own-lag matrix `A_{lag+1}` (zero-based `lag`).
    pub fn own_lag(&self, spec: &ModelSpec, lag: usize) -> DMatrix<f64> {
        DMatrix::from_fn(spec.d, spec.d, |m, n| self.coef[(spec.own_lag_row(lag, n), m)])
    }

    /// Exogenous lag matrix `B_{lag+1}` (zero-based `lag`).
    pub fn exo_lag(&self, spec: &ModelSpec, lag: usize) -> DMatrix<f64> {
        DMatrix::from_fn(spec.d, spec.d_exo, |m, n| self.coef[(spec.exo_lag_row(lag, n), m)])
    }

    pub fn intercept(&self, spec: &ModelSpec) -> Option<DVector<f64>> {
        spec.intercept_row().map(|row| self.coef.row(row).transpose())
    }
}

/// Full parameter set: per-regime dynamics, transition matrix and initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MsVarModel {
    spec: ModelSpec,
    regimes: Vec<RegimeParams>,
    trans: DMatrix<f64>,
    init: DVector<f64>,
}

impl MsVarModel {
    pub fn new(
        spec: ModelSpec,
        regimes: Vec<RegimeParams>,
        trans: DMatrix<f64>,
        init: DVector<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        let m = spec.n_states;
        if regimes.len() != m {
            return Err(Error::Dimension(format!("expected {m} regimes, got {}", regimes.len())));
        }
        if trans.shape() != (m, m) || init.len() != m {
            return Err(Error::Dimension("transition matrix must be M × M, init length M".into()));
        }
        check_distribution(trans.row(0).len(), trans.row_iter().map(|r| r.iter().copied().collect()))?;
        check_distribution(m, std::iter::once(init.iter().copied().collect()))?;
        for r in &regimes {
            if r.coef.shape() != (spec.n_regressors(), spec.d) || r.precision.nrows() != spec.d {
                return Err(Error::Dimension("regime dimensions do not match spec".into()));
            }
        }
        Ok(Self { spec, regimes, trans, init })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn regimes(&self) -> &[RegimeParams] {
        &self.regimes
    }

    pub fn regime(&self, s: usize) -> &RegimeParams {
        &self.regimes[s]
    }

    /// Row-stochastic transition matrix, `trans[(i, j)] = P(S_t = j | S_{t-1} = i)`.
    pub fn trans(&self) -> &DMatrix<f64> {
        &self.trans
    }

    pub fn init(&self) -> &DVector<f64> {
        &self.init
    }

    /// Relabels regimes so that new regime `i` is old regime `perm[i]`.
    pub fn permute_states(&self, perm: &[usize]) -> Result<MsVarModel> {
        let m = self.spec.n_states;
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of 0..{m}")));
        }
        let regimes = perm.iter().map(|&p| self.regimes[p].clone()).collect();
        let trans = DMatrix::from_fn(m, m, |i, j| self.trans[(perm[i], perm[j])]);
        let init = DVector::from_fn(m, |i, _| self.init[perm[i]]);
        Ok(MsVarModel { spec: self.spec, regimes, trans, init })
    }
}

fn check_distribution(width: usize, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    for row in rows {
        if row.len() != width {
            return Err(Error::Dimension("probability vector has wrong length".into()));
        }
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(format!("probabilities out of [0, 1]: {row:?}")));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
        }
    }
    Ok(())
}

/// Parameter block of a flattened slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    OwnLag,
    Exogenous,
    Intercept,
    PrecisionOffDiag,
    PrecisionDiag,
    Transition,
    Initial,
}

impl Block {
    /// Blocks carrying an ℓ₁ penalty.
    pub fn is_penalized(self) -> bool {
        matches!(self, Block::OwnLag | Block::Exogenous | Block::PrecisionOffDiag)
    }

    pub fn is_coefficient(self) -> bool {
        matches!(self, Block::OwnLag | Block::Exogenous | Block::Intercept)
    }
}

/// Location of one flattened parameter.
///
/// For coefficient blocks `row`/`col` index the `d × d` (or `d × d*`) lag
/// matrix; for precision blocks they index `Q(s)`; for the transition block
/// they are the from/to regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub block: Block,
    pub state: usize,
    pub lag: usize,
    pub row: usize,
    pub col: usize,
}

/// Flattened parameter vector `φ = (θ_A, θ_B, Q^ND, Q^D, π)`.
///
/// `θ_A` stacks `[A_1(s), …, A_p(s)]` column-major regime by regime, `θ_B`
/// does the same for the exogenous block followed by the intercept column,
/// `Q^ND` lists the strictly-lower triangle column by column
/// (`q₂₁, q₃₁, …, q_d1, q₃₂, …`), `Q^D` the diagonals, and `π` the
/// transition rows followed by the initial distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    pub index: Vec<ParamSlot>,
}

impl FlatParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSlot, f64)> {
        self.index.iter().zip(self.values.iter().copied())
    }
}

/// Slot layout of the flattened parameter vector for `spec`.
pub fn param_layout(spec: &ModelSpec) -> Vec<ParamSlot> {
    let (m, d) = (spec.n_states, spec.d);
    let slot = |block, state, lag, row, col| ParamSlot { block, state, lag, row, col };
    let mut out = Vec::with_capacity(count_params(spec) + m);
    for s in 0..m {
        for lag in 0..spec.p {
            for col in 0..d {
                for row in 0..d {
                    out.push(slot(Block::OwnLag, s, lag, row, col));
                }
            }
        }
    }
    for s in 0..m {
        for lag in 0..spec.q {
            for col in 0..spec.d_exo {
                for row in 0..d {
                    out.push(slot(Block::Exogenous, s, lag, row, col));
                }
            }
        }
        if spec.intercept {
            for row in 0..d {
                out.push(slot(Block::Intercept, s, 0, row, 0));
            }
        }
    }
    for s in 0..m {
        for col in 0..d {
            for row in col + 1..d {
                out.push(slot(Block::PrecisionOffDiag, s, 0, row, col));
            }
        }
    }
    for s in 0..m {
        for i in 0..d {
            out.push(slot(Block::PrecisionDiag, s, 0, i, i));
        }
    }
    for i in 0..m {
        for j in 0..m {
            out.push(slot(Block::Transition, i, 0, i, j));
        }
    }
    for s in 0..m {
        out.push(slot(Block::Initial, s, 0, s, 0));
    }
    out
}

fn value_at(model: &MsVarModel, slot: &ParamSlot) -> f64 {
    let spec = &model.spec;
    let r = &model.regimes[slot.state];
    match slot.block {
        Block::OwnLag => r.coef[(spec.own_lag_row(slot.lag, slot.col), slot.row)],
        Block::Exogenous => r.coef[(spec.exo_lag_row(slot.lag, slot.col), slot.row)],
        Block::Intercept => r.coef[(spec.n_regressors() - 1, slot.row)],
        Block::PrecisionOffDiag | Block::PrecisionDiag => r.precision[(slot.row, slot.col)],
        Block::Transition => model.trans[(slot.row, slot.col)],
        Block::Initial => model.init[slot.state],
    }
}

pub fn flatten(model: &MsVarModel) -> FlatParams {
    let index = param_layout(&model.spec);
    let values = index.iter().map(|slot| value_at(model, slot)).collect();
    FlatParams { values, index }
}

pub fn unflatten(values: &[f64], spec: &ModelSpec) -> Result<MsVarModel> {
    spec.validate()?;
    let layout = param_layout(spec);
    if values.len() != layout.len() {
        return Err(Error::Dimension(format!(
            "flat vector has length {}, layout needs {}",
            values.len(),
            layout.len()
        )));
    }
    let (m, d, k) = (spec.n_states, spec.d, spec.n_regressors());
    let mut coefs = vec![DMatrix::zeros(k, d); m];
    let mut precs = vec![DMatrix::zeros(d, d); m];
    let mut trans = DMatrix::zeros(m, m);
    let mut init = DVector::zeros(m);
    for (slot, &v) in layout.iter().zip(values) {
        let s = slot.state;
        match slot.block {
            Block::OwnLag => coefs[s][(spec.own_lag_row(slot.lag, slot.col), slot.row)] = v,
            Block::Exogenous => coefs[s][(spec.exo_lag_row(slot.lag, slot.col), slot.row)] = v,
            Block::Intercept => coefs[s][(k - 1, slot.row)] = v,
            Block::PrecisionOffDiag => {
                precs[s][(slot.row, slot.col)] = v;
                precs[s][(slot.col, slot.row)] = v;
            }
            Block::PrecisionDiag => precs[s][(slot.row, slot.row)] = v,
            Block::Transition => trans[(slot.row, slot.col)] = v,
            Block::Initial => init[s] = v,
        }
    }
    let regimes = coefs
        .into_iter()
        .zip(precs)
        .map(|(c, q)| RegimeParams::new(spec, c, q))
        .collect::<Result<Vec<_>>>()?;
    MsVarModel::new(*spec, regimes, trans, init)
}

/// Regressor vector `z_t` for zero-based row `t` (`L ≤ t ≤ T`; `t = T`
/// gives the regressors of the one-step-ahead forecast).
pub fn regressors(data: &Dataset, spec: &ModelSpec, t: usize) -> Result<DVector<f64>> {
    let lag = spec.max_lag();
    if t < lag || t > data.n_obs() {
        return Err(Error::InvalidArgument(format!(
            "time index {t} outside [{lag}, {}]",
            data.n_obs()
        )));
    }
    let mut z = DVector::zeros(spec.n_regressors());
    for j in 0..spec.p {
        for n in 0..spec.d {
            z[spec.own_lag_row(j, n)] = data.y[(t - j - 1, n)];
        }
    }
    for j in 0..spec.q {
        for n in 0..spec.d_exo {
            z[spec.exo_lag_row(j, n)] = data.x[(t - j - 1, n)];
        }
    }
    if let Some(row) = spec.intercept_row() {
        z[row] = 1.0;
    }
    Ok(z)
}

/// `ω_t = y_t − Σ A_j(s) y_{t−j} − Σ B_j(s) x_{t−j}` for zero-based row `t ≥ L`.
pub fn residual(model: &MsVarModel, state: usize, t: usize, data: &Dataset) -> Result<DVector<f64>> {
    if state >= model.spec.n_states {
        return Err(Error::InvalidArgument(format!("state {state} out of range")));
    }
    if t >= data.n_obs() {
        return Err(Error::InvalidArgument(format!("time index {t} out of range")));
    }
    model.spec.check_data(data)?;
    let z = regressors(data, &model.spec, t)?;
    let fitted = model.regimes[state].coef.tr_mul(&z);
    Ok(data.y.row(t).transpose() - fitted)
}

/// Responses and stacked regressors over the usable sample `t = L..T`.
#[derive(Debug, Clone)]
pub struct Design {
    /// `(T−L) × d` responses.
    pub y: DMatrix<f64>,
    /// `(T−L) × k` regressors.
    pub z: DMatrix<f64>,
    /// `L`, the number of presample rows.
    pub offset: usize,
}

impl Design {
    pub fn new(data: &Dataset, spec: &ModelSpec) -> Result<Self> {
        spec.check_data(data)?;
        let lag = spec.max_lag();
        let n = data.n_obs() - lag;
        let mut z = DMatrix::zeros(n, spec.n_regressors());
        for i in 0..n {
            z.set_row(i, &regressors(data, spec, lag + i)?.transpose());
        }
        let y = data.y.rows(lag, n).into_owned();
        Ok(Self { y, z, offset: lag })
    }

    pub fn n_usable(&self) -> usize {
        self.y.nrows()
    }

    /// `(T−L) × d` residuals `Y − Z C` for a coefficient matrix `C`.
    pub fn residuals(&self, coef: &DMatrix<f64>) -> DMatrix<f64> {
        &self.y - &self.z * coef
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model(spec: ModelSpec, seed: u64) -> MsVarModel {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let regimes = (0..spec.n_states)
            .map(|_| {
                let coef = DMatrix::from_fn(spec.n_regressors(), spec.d, |_, _| rng.gen_range(-1.0..1.0));
                let a = DMatrix::from_fn(spec.d, spec.d, |_, _| rng.gen_range(-0.5..0.5));
                let q = &a * a.transpose() + DMatrix::identity(spec.d, spec.d);
                RegimeParams::new(&spec, coef, q).unwrap()
            })
            .collect();
        let m = spec.n_states;
        let mut trans = DMatrix::from_fn(m, m, |_, _| rng.gen_range(0.1..1.0));
        for mut row in trans.row_iter_mut() {
            let s: f64 = row.sum();
            row /= s;
        }
        let init = DVector::from_element(m, 1.0 / m as f64);
        MsVarModel::new(spec, regimes, trans, init).unwrap()
    }

    #[test]
    fn count_params_examples() {
        assert_eq!(count_params(&ModelSpec::new(1, 1, 1)), 3);
        assert_eq!(count_params(&ModelSpec::new(2, 1, 10)), 314);
        assert_eq!(count_params(&ModelSpec::new(2, 2, 16)), 1300);
        assert_eq!(count_params(&ModelSpec::new(2, 1, 15).with_intercept(true)), 724);
    }

    #[test]
    fn precision_offdiag_order() {
        let spec = ModelSpec::new(2, 1, 3);
        let layout = param_layout(&spec);
        let nd: Vec<_> = layout
            .iter()
            .filter(|s| s.block == Block::PrecisionOffDiag)
            .map(|s| (s.state, s.row + 1, s.col + 1))
            .collect();
        assert_eq!(nd, vec![(0, 2, 1), (0, 3, 1), (0, 3, 2), (1, 2, 1), (1, 3, 1), (1, 3, 2)]);
    }

    #[test]
    fn flatten_m2_d2_known_entries() {
        let spec = ModelSpec::new(2, 1, 2);
        let q1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let q2 = DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 3.0]);
        let a1 = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let a2 = DMatrix::from_row_slice(2, 2, &[-0.1, -0.2, -0.3, -0.4]);
        let r1 = RegimeParams::from_blocks(&spec, &[a1], &[], None, q1).unwrap();
        let r2 = RegimeParams::from_blocks(&spec, &[a2], &[], None, q2).unwrap();
        let trans = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.25, 0.75]);
        let init = DVector::from_vec(vec![0.6, 0.4]);
        let model = MsVarModel::new(spec, vec![r1, r2], trans, init).unwrap();
        let flat = flatten(&model);
        // θ_A column-major per state, then Q^ND = (q21(1), q21(2)), Q^D, π.
        let expected = vec![
            0.1, 0.3, 0.2, 0.4, -0.1, -0.3, -0.2, -0.4, 0.3, -0.4, 2.0, 1.0, 1.5, 3.0, 0.9, 0.1,
            0.25, 0.75, 0.6, 0.4,
        ];
        assert_eq!(flat.values, expected);
        assert_eq!(unflatten(&flat.values, &spec).unwrap(), model);
    }

    #[test]
    fn identity_precision_round_trip() {
        let spec = ModelSpec::new(1, 1, 3);
        let r = RegimeParams::new(&spec, DMatrix::zeros(3, 3), DMatrix::identity(3, 3)).unwrap();
        let model = MsVarModel::new(spec, vec![r], DMatrix::identity(1, 1), DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(unflatten(&flatten(&model).values, &spec).unwrap(), model);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let spec = ModelSpec::new(1, 1, 2);
        assert!(matches!(unflatten(&[0.0; 3], &spec), Err(Error::Dimension(_))));
    }

    #[test]
    fn regime_rejects_non_pd_precision() {
        let spec = ModelSpec::new(1, 1, 2);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(RegimeParams::new(&spec, DMatrix::zeros(2, 2), q).is_err());
    }

    #[test]
    fn residual_zero_coefficients_returns_observation() {
        let spec = ModelSpec::new(1, 1, 2);
        let model = toy_model(spec, 1);
        let zero = RegimeParams::new(&spec, DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let model = MsVarModel::new(spec, vec![zero], model.trans().clone(), model.init().clone()).unwrap();
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let data = Dataset::endogenous(y).unwrap();
        let w = residual(&model, 0, 2, &data).unwrap();
        assert_eq!(w.as_slice(), &[5.0, 6.0]);
    }

    #[test]
    fn residual_exact_ar1_fit() {
        let spec = ModelSpec::new(1, 1, 1);
        let r = RegimeParams::new(&spec, DMatrix::from_element(1, 1, 0.8), DMatrix::identity(1, 1)).unwrap();
        let model = MsVarModel::new(spec, vec![r], DMatrix::identity(1, 1), DVector::from_element(1, 1.0)).unwrap();
        let data = Dataset::endogenous(DMatrix::from_column_slice(2, 1, &[1.0, 0.8])).unwrap();
        assert!(residual(&model, 0, 1, &data).unwrap()[0].abs() < 1e-15);
        assert!(residual(&model, 0, 0, &data).is_err());
    }

    #[test]
    fn residual_matches_dense_evaluation() {
        use rand::{Rng, SeedableRng};
        let spec = ModelSpec::new(2, 2, 3).with_exogenous(2, 1).with_intercept(true);
        let model = toy_model(spec, 7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let y = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let x = DMatrix::from_fn(6, 2, |_, _| rng.gen_range(-1.0..1.0));
        let data = Dataset::new(y.clone(), x.clone()).unwrap();
        for s in 0..2 {
            let r = model.regime(s);
            let t = 4;
            let mut expected = y.row(t).transpose();
            for j in 0..2 {
                expected -= r.own_lag(&spec, j) * y.row(t - j - 1).transpose();
            }
            expected -= r.exo_lag(&spec, 0) * x.row(t - 1).transpose();
            expected -= r.intercept(&spec).unwrap();
            let got = residual(&model, s, t, &data).unwrap();
            assert!((got - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn permute_states_swaps_everything() {
        let spec = ModelSpec::new(2, 1, 2);
        let model = toy_model(spec, 11);
        let swapped = model.permute_states(&[1, 0]).unwrap();
        assert_eq!(swapped.regime(0), model.regime(1));
        assert_eq!(swapped.trans()[(0, 0)], model.trans()[(1, 1)]);
        assert_eq!(swapped.permute_states(&[1, 0]).unwrap(), model);
        assert!(model.permute_states(&[0, 0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_spec() -> impl Strategy<Value = ModelSpec> {
            (1usize..=3, 1usize..=2, 1usize..=4, 0usize..=2, 0usize..=2, any::<bool>()).prop_map(
                |(m, p, d, dx, q, c)| {
                    let q = if dx == 0 { 0 } else { q };
                    ModelSpec::new(m, p, d).with_exogenous(dx, q).with_intercept(c)
                },
            )
        }

        proptest! {
            #[test]
            fn flatten_round_trips_and_counts(spec in arb_spec(), seed in any::<u64>()) {
                let model = toy_model(spec, seed);
                let flat = flatten(&model);
                // π carries the initial distribution on top of the K_T slots.
                prop_assert_eq!(flat.len(), count_params(&spec) + spec.n_states);
                prop_assert_eq!(unflatten(&flat.values, &spec).unwrap(), model);
            }
        }
    }
}
