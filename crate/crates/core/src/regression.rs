//! Penalized, probability-weighted multivariate regression with a fixed precision matrix.
//!
//! Minimizes `f(C) = tr(Ŝ(C) Q) + 2λ Σ w_ij |C_ij|` where
//! `Ŝ(C) = Σ_t γ_t (y_t − Cᵀz_t)(y_t − Cᵀz_t)ᵀ / Σ_t γ_t`.
//! Writing `G = Σγ z zᵀ`, `H = Σγ z yᵀ` and `n = Σγ`, the smooth part has
//! gradient `2(GCQ − HQ)/n` and the coordinate `C_ij` has curvature
//! `2 G_ii Q_jj / n`, so every coordinate step is a closed-form soft threshold
//! `C_ij = soft((HQ)_ij − (GCQ)_ij + G_ii Q_jj C_ij, n λ w_ij) / (G_ii Q_jj)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{soft_threshold, symmetrize, trace_of_product};

pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_SWEEPS: usize = 500;

/// Weighted sufficient statistics of one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionStats {
    /// `Σ γ_t z_t z_tᵀ` (k × k).
    pub gram: DMatrix<f64>,
    /// `Σ γ_t z_t y_tᵀ` (k × d).
    pub cross: DMatrix<f64>,
    /// `Σ γ_t y_t y_tᵀ` (d × d).
    pub yy: DMatrix<f64>,
    /// `Σ γ_t`.
    pub weight: f64,
}

impl RegressionStats {
    pub fn new(y: &DMatrix<f64>, z: &DMatrix<f64>, gamma: &DVector<f64>) -> Result<Self> {
        let n = y.nrows();
        if z.nrows() != n || gamma.len() != n {
            return Err(Error::Dimension(format!(
                "rows: y {n}, z {}, weights {}",
                z.nrows(),
                gamma.len()
            )));
        }
        if z.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("regression data has non-finite entries".into()));
        }
        if gamma.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::InvalidArgument("state weights must be nonnegative".into()));
        }
        let weight = gamma.sum();
        if !(weight > 0.0) {
            return Err(Error::InvalidArgument("total state weight is zero".into()));
        }
        let mut zw = z.clone();
        for (mut row, g) in zw.row_iter_mut().zip(gamma.iter()) {
            row *= *g;
        }
        let zwt = zw.transpose();
        let mut yw = y.clone();
        for (mut row, g) in yw.row_iter_mut().zip(gamma.iter()) {
            row *= *g;
        }
        Ok(Self {
            gram: symmetrize(&(&zwt * z)),
            cross: &zwt * y,
            yy: symmetrize(&(yw.transpose() * y)),
            weight,
        })
    }

    pub fn n_regressors(&self) -> usize {
        self.gram.nrows()
    }

    pub fn dim(&self) -> usize {
        self.yy.nrows()
    }

    /// `Ŝ(C) = (YY − CᵀH − HᵀC + CᵀGC) / n`.
    pub fn scatter(&self, coef: &DMatrix<f64>) -> DMatrix<f64> {
        let ch = coef.transpose() * &self.cross;
        let cgc = coef.transpose() * &self.gram * coef;
        symmetrize(&((&self.yy - &ch - ch.transpose() + cgc) / self.weight))
    }
}

#[derive(Debug, Clone)]
pub struct CoefSolution {
    pub coef: DMatrix<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// `tr(Ŝ(C) Q) + 2λ Σ w_ij |C_ij|`.
pub fn coef_objective(
    stats: &RegressionStats,
    coef: &DMatrix<f64>,
    precision: &DMatrix<f64>,
    lambda: f64,
    weights: &DMatrix<f64>,
) -> f64 {
    let pen: f64 = coef.iter().zip(weights.iter()).map(|(c, w)| w * c.abs()).sum();
    trace_of_product(&stats.scatter(coef), precision) + 2.0 * lambda * pen
}

/// Solves the coefficient subproblem; `warm` seeds coordinate descent.
pub fn coef_update(
    stats: &RegressionStats,
    precision: &DMatrix<f64>,
    lambda: f64,
    weights: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
    tol: f64,
    max_sweeps: usize,
) -> Result<CoefSolution> {
    let (k, d) = (stats.n_regressors(), stats.dim());
    if precision.shape() != (d, d) || weights.shape() != (k, d) {
        return Err(Error::Dimension(format!(
            "precision {:?} and weights {:?} do not fit k = {k}, d = {d}",
            precision.shape(),
            weights.shape()
        )));
    }
    if !(lambda >= 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("penalty must be nonnegative".into()));
    }
    if (0..d).any(|j| !(precision[(j, j)] > 0.0)) {
        return Err(Error::NotPositiveDefinite("precision has a nonpositive diagonal".into()));
    }

    // without a penalty the argmin is the weighted least-squares solution for any Q
    if lambda == 0.0 || weights.iter().all(|&w| w == 0.0) {
        if let Some(chol) = stats.gram.clone().cholesky() {
            return Ok(CoefSolution { coef: chol.solve(&stats.cross), sweeps: 0, converged: true });
        }
    }
    let init = match warm {
        Some(c) if c.shape() == (k, d) => c.clone(),
        _ => DMatrix::zeros(k, d),
    };
    Ok(coordinate_descent(stats, precision, lambda, weights, init, tol, max_sweeps))
}

struct Workspace<'a> {
    stats: &'a RegressionStats,
    precision: &'a DMatrix<f64>,
    hq: DMatrix<f64>,
    /// penalty thresholds `n λ w_ij`
    thresh: DMatrix<f64>,
    /// `G C`, kept current
    gc: DMatrix<f64>,
    coef: DMatrix<f64>,
}

impl Workspace<'_> {
    /// Exact minimization in `C_ij`; returns the scaled change.
    fn step(&mut self, i: usize, j: usize) -> f64 {
        let g = &self.stats.gram;
        let q = self.precision;
        let gii = g[(i, i)];
        let old = self.coef[(i, j)];
        let new = if gii > 0.0 {
            let curv = gii * q[(j, j)];
            let gcq: f64 = (0..q.nrows()).map(|l| self.gc[(i, l)] * q[(l, j)]).sum();
            soft_threshold(self.hq[(i, j)] - gcq + curv * old, self.thresh[(i, j)]) / curv
        } else {
            0.0
        };
        let delta = new - old;
        if delta != 0.0 {
            self.coef[(i, j)] = new;
            let mut col = self.gc.column_mut(j);
            col.axpy(delta, &g.column(i), 1.0);
        }
        delta.abs() * (gii / self.stats.weight).sqrt()
    }

    fn sweep(&mut self, coords: &[(usize, usize)]) -> f64 {
        coords.iter().fold(0.0, |acc: f64, &(i, j)| acc.max(self.step(i, j)))
    }
}

pub(crate) fn coordinate_descent(
    stats: &RegressionStats,
    precision: &DMatrix<f64>,
    lambda: f64,
    weights: &DMatrix<f64>,
    init: DMatrix<f64>,
    tol: f64,
    max_sweeps: usize,
) -> CoefSolution {
    let (k, d) = (stats.n_regressors(), stats.dim());
    let mut ws = Workspace {
        stats,
        precision,
        hq: &stats.cross * precision,
        thresh: weights * (stats.weight * lambda),
        gc: &stats.gram * &init,
        coef: init,
    };
    let all: Vec<(usize, usize)> = (0..d).flat_map(|j| (0..k).map(move |i| (i, j))).collect();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_sweeps {
        let change = ws.sweep(&all);
        sweeps += 1;
        if change < tol {
            converged = true;
            break;
        }
        if sweeps < 2 {
            continue;
        }
        // iterate on the current support, then confirm with a full sweep
        let active: Vec<(usize, usize)> = all.iter().copied().filter(|&(i, j)| ws.coef[(i, j)] != 0.0).collect();
        while sweeps < max_sweeps {
            sweeps += 1;
            if ws.sweep(&active) < tol {
                break;
            }
        }
    }
    if !converged {
        log::warn!("coefficient update did not converge in {max_sweeps} sweeps");
    }
    CoefSolution { coef: ws.coef, sweeps, converged }
}

/// `Σ_t γ_t ω_t ω_tᵀ / Σ_t γ_t` with `ω_t = y_t − Cᵀ z_t`, computed directly from residuals.
pub fn weighted_scatter(
    y: &DMatrix<f64>,
    z: &DMatrix<f64>,
    coef: &DMatrix<f64>,
    gamma: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if z.ncols() != coef.nrows() || y.ncols() != coef.ncols() || y.nrows() != z.nrows() || gamma.len() != y.nrows() {
        return Err(Error::Dimension("inconsistent regression shapes".into()));
    }
    let total = gamma.sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("total state weight is zero".into()));
    }
    let resid = y - z * coef;
    let mut weighted = resid.clone();
    for (mut row, g) in weighted.row_iter_mut().zip(gamma.iter()) {
        row *= *g;
    }
    Ok(symmetrize(&(weighted.transpose() * resid / total)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        y: DMatrix<f64>,
        z: DMatrix<f64>,
        gamma: DVector<f64>,
        q: DMatrix<f64>,
        w: DMatrix<f64>,
    }

    fn instance(seed: u64, n: usize, k: usize, d: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0f64..1.0));
        let truth = DMatrix::from_fn(k, d, |_, _| if rng.gen_bool(0.4) { rng.gen_range(-1.0..1.0) } else { 0.0 });
        let noise = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-0.5f64..0.5));
        let y = &z * truth + noise;
        let gamma = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0));
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0f64..1.0));
        let q = &a * a.transpose() + DMatrix::identity(d, d);
        let w = DMatrix::from_fn(k, d, |_, _| rng.gen_range(0.0..2.0));
        Instance { y, z, gamma, q, w }
    }

    fn max_kkt_violation(stats: &RegressionStats, c: &DMatrix<f64>, q: &DMatrix<f64>, lambda: f64, w: &DMatrix<f64>) -> f64 {
        // gradient of the smooth part, computed from the definition rather than the workspace
        let grad = (&stats.gram * c * q - &stats.cross * q) * (2.0 / stats.weight);
        let mut worst: f64 = 0.0;
        for i in 0..c.nrows() {
            for j in 0..c.ncols() {
                let bound = 2.0 * lambda * w[(i, j)];
                let v = if c[(i, j)] != 0.0 {
                    (grad[(i, j)] + bound * c[(i, j)].signum()).abs()
                } else {
                    (grad[(i, j)].abs() - bound).max(0.0)
                };
                worst = worst.max(v);
            }
        }
        worst
    }

    #[test]
    fn unpenalized_matches_ols() {
        let inst = instance(1, 80, 4, 3);
        let ones = DVector::from_element(80, 1.0);
        let stats = RegressionStats::new(&inst.y, &inst.z, &ones).unwrap();
        let sol = coef_update(&stats, &DMatrix::identity(3, 3), 0.0, &inst.w, None, 1e-12, 10_000).unwrap();
        // normal equations through an SVD, column by column
        let svd = inst.z.clone().svd(true, true);
        for j in 0..3 {
            let col = svd.solve(&inst.y.column(j).into_owned(), 1e-14).unwrap();
            assert!((sol.coef.column(j) - col).amax() < 1e-8);
        }
        // the iterative path reaches the same point
        let cd = coordinate_descent(&stats, &inst.q, 0.0, &inst.w, DMatrix::zeros(4, 3), 1e-13, 100_000);
        assert!((&cd.coef - &sol.coef).amax() < 1e-8);
    }

    #[test]
    fn huge_penalty_zeroes_everything() {
        let inst = instance(2, 50, 5, 2);
        let stats = RegressionStats::new(&inst.y, &inst.z, &inst.gamma).unwrap();
        let w = DMatrix::from_element(5, 2, 1.0);
        let sol = coef_update(&stats, &inst.q, 1e6, &w, None, DEFAULT_TOL, DEFAULT_MAX_SWEEPS).unwrap();
        assert!(sol.coef.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_problem_matches_grid_search() {
        // d = 1, k = 1: f(c) = q (Σy² − 2cΣzy + c²Σz²)/n + 2λw|c|
        let z = DMatrix::from_column_slice(5, 1, &[0.5, -1.0, 2.0, 0.3, 1.2]);
        let y = DMatrix::from_column_slice(5, 1, &[0.7, -0.4, 1.5, 0.1, 0.2]);
        let gamma = DVector::from_element(5, 1.0);
        let stats = RegressionStats::new(&y, &z, &gamma).unwrap();
        let q = DMatrix::from_element(1, 1, 1.7);
        let w = DMatrix::from_element(1, 1, 1.0);
        for lambda in [0.0, 0.05, 0.2, 0.6, 2.0] {
            let sol = coef_update(&stats, &q, lambda, &w, None, 1e-12, 1000).unwrap();
            let f = |c: f64| {
                let s: f64 = (0..5).map(|t| (y[t] - c * z[t]).powi(2)).sum::<f64>() / 5.0;
                1.7 * s + 2.0 * lambda * c.abs()
            };
            let (mut best, mut best_f) = (0.0, f(0.0));
            for i in -200_000..=200_000 {
                let c = i as f64 * 1e-5;
                if f(c) < best_f {
                    best = c;
                    best_f = f(c);
                }
            }
            assert!((sol.coef[(0, 0)] - best).abs() < 2e-5, "λ={lambda}: {} vs {best}", sol.coef[(0, 0)]);
        }
    }

    #[test]
    fn zero_regressor_column_gives_zero_row() {
        let mut inst = instance(3, 40, 3, 2);
        inst.z.column_mut(1).fill(0.0);
        let stats = RegressionStats::new(&inst.y, &inst.z, &inst.gamma).unwrap();
        let sol = coef_update(&stats, &inst.q, 0.01, &inst.w, None, 1e-10, 1000).unwrap();
        assert!(sol.coef.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scatter_cases() {
        let inst = instance(4, 30, 3, 2);
        let truth = DMatrix::from_fn(3, 2, |i, j| (i + j) as f64 * 0.3);
        let y = &inst.z * &truth;
        let s = weighted_scatter(&y, &inst.z, &truth, &inst.gamma).unwrap();
        assert!(s.amax() < 1e-12);
        let uniform = DVector::from_element(30, 2.0);
        let s = weighted_scatter(&inst.y, &inst.z, &DMatrix::zeros(3, 2), &uniform).unwrap();
        let moment = inst.y.transpose() * &inst.y / 30.0;
        assert!((s - moment).amax() < 1e-12);
        assert!(weighted_scatter(&inst.y, &inst.z, &truth, &DVector::zeros(30)).is_err());
    }

    #[test]
    fn scatter_matches_naive_loop() {
        let inst = instance(5, 25, 4, 3);
        let c = DMatrix::from_fn(4, 3, |i, j| 0.1 * i as f64 - 0.2 * j as f64);
        let mut naive = DMatrix::zeros(3, 3);
        let mut total = 0.0;
        for t in 0..25 {
            let mut resid = vec![0.0; 3];
            for (m, r) in resid.iter_mut().enumerate() {
                *r = inst.y[(t, m)];
                for i in 0..4 {
                    *r -= c[(i, m)] * inst.z[(t, i)];
                }
            }
            for m in 0..3 {
                for n in 0..3 {
                    naive[(m, n)] += inst.gamma[t] * resid[m] * resid[n];
                }
            }
            total += inst.gamma[t];
        }
        naive /= total;
        let direct = weighted_scatter(&inst.y, &inst.z, &c, &inst.gamma).unwrap();
        let stats = RegressionStats::new(&inst.y, &inst.z, &inst.gamma).unwrap();
        assert!((&direct - &naive).amax() < 1e-12);
        assert!((stats.scatter(&c) - &naive).amax() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn kkt_holds(seed in any::<u64>(), k in 1usize..6, d in 1usize..4, lambda in 0.0f64..0.3) {
                let inst = instance(seed, 60, k, d);
                let mut w = inst.w.clone();
                w.row_mut(0).fill(0.0); // one unpenalized row
                let stats = RegressionStats::new(&inst.y, &inst.z, &inst.gamma).unwrap();
                let sol = coordinate_descent(&stats, &inst.q, lambda, &w, DMatrix::zeros(k, d), 1e-12, 100_000);
                prop_assert!(sol.converged);
                prop_assert!(max_kkt_violation(&stats, &sol.coef, &inst.q, lambda, &w) < 1e-8);
            }

            #[test]
            fn sweeps_never_increase_objective(seed in any::<u64>(), lambda in 0.0f64..0.3) {
                let inst = instance(seed, 50, 5, 3);
                let stats = RegressionStats::new(&inst.y, &inst.z, &inst.gamma).unwrap();
                let mut c = DMatrix::zeros(5, 3);
                let mut last = coef_objective(&stats, &c, &inst.q, lambda, &inst.w);
                for _ in 0..20 {
                    c = coordinate_descent(&stats, &inst.q, lambda, &inst.w, c, 0.0, 1).coef;
                    let obj = coef_objective(&stats, &c, &inst.q, lambda, &inst.w);
                    prop_assert!(obj <= last + 1e-12 * (1.0 + last.abs()));
                    last = obj;
                }
            }

            #[test]
            fn invariant_to_weight_rescaling(seed in any::<u64>(), scale in 0.01f64..100.0, lambda in 0.0f64..0.3) {
                let inst = instance(seed, 60, 4, 2);
                let a = RegressionStats::new(&inst.y, &inst.z, &inst.gamma).unwrap();
                let b = RegressionStats::new(&inst.y, &inst.z, &(&inst.gamma * scale)).unwrap();
                let ca = coef_update(&a, &inst.q, lambda, &inst.w, None, 1e-12, 100_000).unwrap().coef;
                let cb = coef_update(&b, &inst.q, lambda, &inst.w, None, 1e-12, 100_000).unwrap().coef;
                prop_assert!((&ca - &cb).amax() < 1e-8);
            }
        }
    }
}
