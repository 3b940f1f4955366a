//! Seeded simulation of Markov chains and MS-VAR paths, including the three
//! Monte Carlo designs.
//!
//! Every random draw comes from a ChaCha8 stream keyed by `(seed, stream)`,
//! so replications can be generated in any order or in parallel and still be
//! bit-identical.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, inverse_spd};
use crate::model::{Dataset, ModelSpec, MsVarModel, RegimeParams};

pub const DEFAULT_BURN_IN: usize = 200;

/// A draw is explosive once `|y|` exceeds this multiple of the innovation and intercept scale.
pub const EXPLOSIVE_FACTOR: f64 = 1e10;

const CHAIN_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const EXO_STREAM: u64 = 2;

/// Independent generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The three designs of the Monte Carlo study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Experiment {
    One,
    Two,
    Three,
}

impl Experiment {
    pub fn id(self) -> u8 {
        match self {
            Experiment::One => 1,
            Experiment::Two => 2,
            Experiment::Three => 3,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Experiment::One),
            "2" => Ok(Experiment::Two),
            "3" => Ok(Experiment::Three),
            other => Err(Error::Config(format!("unknown experiment `{other}` (expected 1, 2 or 3)"))),
        }
    }
}

/// Block-diagonal matrix of two tridiagonal blocks (0.5 diagonal, −0.45 off-diagonal).
fn tridiagonal_blocks(d: usize) -> DMatrix<f64> {
    let half = d / 2;
    DMatrix::from_fn(d, d, |i, j| {
        if i / half != j / half {
            0.0
        } else if i == j {
            0.5
        } else if i.abs_diff(j) == 1 {
            -0.45
        } else {
            0.0
        }
    })
}

fn toeplitz_power(d: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Two-state model of the requested design; both states persist with probability 0.8.
pub fn dgp(experiment: Experiment, d: usize) -> Result<MsVarModel> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("experiment {experiment} needs d >= 2")));
    }
    if experiment != Experiment::One && d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("experiment {experiment} needs an even dimension, got {d}")));
    }
    let (lags, covs): (Vec<DMatrix<f64>>, [DMatrix<f64>; 2]) = match experiment {
        Experiment::One => (
            vec![DMatrix::identity(d, d) * 0.8],
            [DMatrix::identity(d, d), DMatrix::identity(d, d)],
        ),
        Experiment::Two => (
            vec![tridiagonal_blocks(d)],
            [toeplitz_power(d, 0.7), toeplitz_power(d, 0.4)],
        ),
        Experiment::Three => {
            let a1 = tridiagonal_blocks(d);
            let a2 = a1.map(|v| v * v);
            (vec![a1, a2], [DMatrix::identity(d, d) * 0.8, DMatrix::identity(d, d) * 0.4])
        }
    };
    let spec = ModelSpec::new(2, lags.len(), d);
    let regimes = [1.0, -1.0]
        .iter()
        .zip(&covs)
        .map(|(sign, cov)| {
            let own: Vec<DMatrix<f64>> = lags.iter().map(|a| a * *sign).collect();
            RegimeParams::from_blocks(&spec, &own, &[], None, inverse_spd(cov)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let trans = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8]);
    MsVarModel::new(spec, regimes, trans, DVector::from_element(2, 0.5))
}

/// Spectral radius of the companion matrix of one regime's own-lag dynamics.
pub fn companion_spectral_radius(model: &MsVarModel, state: usize) -> f64 {
    let spec = model.spec();
    let (d, p) = (spec.d, spec.p);
    let mut companion = DMatrix::zeros(d * p, d * p);
    for j in 0..p {
        companion.view_mut((0, j * d), (d, d)).copy_from(&model.regime(state).own_lag(spec, j));
    }
    for i in d..d * p {
        companion[(i, i - d)] = 1.0;
    }
    companion.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn draw_state(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (s, p) in probs.enumerate() {
        acc += p;
        last = s;
        if u < acc {
            return s;
        }
    }
    last
}

fn chain_from_rng(trans: &DMatrix<f64>, init: &DVector<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut path = Vec::with_capacity(n);
    if n == 0 {
        return path;
    }
    let mut s = draw_state(rng, init.iter().copied());
    path.push(s);
    for _ in 1..n {
        s = draw_state(rng, trans.row(s).iter().copied());
        path.push(s);
    }
    path
}

/// State path (zero-based labels) of length `n`.
pub fn simulate_chain(trans: &DMatrix<f64>, init: &DVector<f64>, n: usize, seed: u64) -> Result<Vec<usize>> {
    let m = init.len();
    if trans.shape() != (m, m) {
        return Err(Error::Dimension("transition matrix does not match the initial distribution".into()));
    }
    for row in trans.row_iter() {
        if row.iter().any(|p| *p < 0.0) || (row.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument("transition matrix must be row-stochastic".into()));
        }
    }
    Ok(chain_from_rng(trans, init, n, &mut stream_rng(seed, CHAIN_STREAM)))
}

/// Simulated sample and the regimes that generated it.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    pub states: Vec<usize>,
}

/// Draws `n` observations after discarding `burn_in`; presample values are zero
/// and exogenous series, if any, are i.i.d. standard normal.
pub fn simulate_msvar(model: &MsVarModel, n: usize, burn_in: usize, seed: u64) -> Result<Simulated> {
    let factors = model
        .regimes()
        .iter()
        .map(|r| Ok(cholesky(&r.covariance(), "innovation covariance")?.l()))
        .collect::<Result<Vec<_>>>()?;
    for s in 0..model.spec().n_states {
        let rho = companion_spectral_radius(model, s);
        if rho >= 1.0 {
            log::warn!("regime {s} is not stable on its own (companion spectral radius {rho:.4})");
        }
    }
    simulate_with_factors(model, &factors, n, burn_in, seed)
}

fn simulate_with_factors(
    model: &MsVarModel,
    factors: &[DMatrix<f64>],
    n: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Simulated> {
    let spec = model.spec();
    let (d, dx, lag) = (spec.d, spec.d_exo, spec.max_lag());
    let total = burn_in + n;
    let states = chain_from_rng(model.trans(), model.init(), total, &mut stream_rng(seed, CHAIN_STREAM));
    let mut noise = stream_rng(seed, NOISE_STREAM);
    let mut exo = stream_rng(seed, EXO_STREAM);

    // rows 0..lag are the zero presample
    let mut y = DMatrix::zeros(lag + total, d);
    let x = DMatrix::from_fn(lag + total, dx, |_, _| exo.sample::<f64, _>(StandardNormal));
    let mut scale: f64 = 1e-300;
    for (r, l) in model.regimes().iter().zip(factors) {
        scale = scale.max(l.amax());
        if let Some(c) = r.intercept(spec) {
            scale = scale.max(c.amax());
        }
    }
    let bound = EXPLOSIVE_FACTOR * scale;
    let mut z = DVector::zeros(spec.n_regressors());
    for t in 0..total {
        let row = lag + t;
        let s = states[t];
        for j in 0..spec.p {
            for c in 0..d {
                z[spec.own_lag_row(j, c)] = y[(row - j - 1, c)];
            }
        }
        for j in 0..spec.q {
            for c in 0..dx {
                z[spec.exo_lag_row(j, c)] = x[(row - j - 1, c)];
            }
        }
        if let Some(r) = spec.intercept_row() {
            z[r] = 1.0;
        }
        let e = DVector::from_fn(d, |_, _| noise.sample::<f64, _>(StandardNormal));
        let value = model.regime(s).coef().tr_mul(&z) + &factors[s] * e;
        if value.iter().any(|v| !v.is_finite() || v.abs() > bound) {
            return Err(Error::Numerical(format!(
                "explosive draw: |y| exceeded {bound:.1e} at step {t} (seed {seed})"
            )));
        }
        y.set_row(row, &value.transpose());
    }
    let start = lag + burn_in;
    let keep_x = x.rows(start, n).into_owned();
    let data = Dataset::new(y.rows(start, n).into_owned(), keep_x)?;
    Ok(Simulated { data, states: states[burn_in..].to_vec() })
}

/// Random model with stable regimes, persistent chain and well-conditioned precisions.
pub fn random_stable_model(spec: &ModelSpec, seed: u64) -> Result<MsVarModel> {
    spec.validate()?;
    let mut rng = stream_rng(seed, 99);
    let (k, d, m) = (spec.n_regressors(), spec.d, spec.n_states);
    let mut regimes = Vec::with_capacity(m);
    for _ in 0..m {
        let coef = DMatrix::from_fn(k, d, |_, _| {
            if rng.gen_bool(0.5) {
                rng.gen_range(-0.9..0.9)
            } else {
                0.0
            }
        });
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.5f64..0.5));
        let precision = &a * a.transpose() + DMatrix::identity(d, d) * rng.gen_range(0.5..2.0);
        regimes.push(RegimeParams::new(spec, coef, crate::linalg::symmetrize(&precision))?);
    }
    let trans = DMatrix::from_fn(m, m, |i, j| {
        if m == 1 {
            1.0
        } else if i == j {
            0.8
        } else {
            0.2 / (m - 1) as f64
        }
    });
    let mut model = MsVarModel::new(*spec, regimes, trans, DVector::from_element(m, 1.0 / m as f64))?;
    // shrink each regime's own-lag block until its companion radius is below 0.9
    for s in 0..m {
        let rho = companion_spectral_radius(&model, s);
        if rho >= 0.9 {
            let shrink = 0.85 / rho;
            let mut regimes = model.regimes().to_vec();
            let mut coef = regimes[s].coef().clone();
            for j in 0..spec.p {
                let factor = shrink.powi(j as i32 + 1);
                for c in 0..d {
                    coef.row_mut(spec.own_lag_row(j, c)).scale_mut(factor);
                }
            }
            regimes[s] = RegimeParams::new(spec, coef, regimes[s].precision().clone())?;
            model = MsVarModel::new(*spec, regimes, model.trans().clone(), model.init().clone())?;
        }
    }
    Ok(model)
}
