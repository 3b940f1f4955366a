//! State alignment, support recovery and parameter-error metrics.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{flatten, Block, MsVarModel};

/// Entries with `|value| ≤ NONZERO_TOL` count as zero.
pub const NONZERO_TOL: f64 = 1e-8;

/// Permutation `perm` such that `estimated.permute_states(&perm)` lines up with
/// `truth`, minimizing the total squared coefficient distance.
pub fn align_states(estimated: &MsVarModel, truth: &MsVarModel) -> Result<Vec<usize>> {
    let m = truth.spec().n_states;
    if estimated.spec() != truth.spec() {
        return Err(Error::Dimension("estimated and true models have different specs".into()));
    }
    let cost = |perm: &[usize]| -> f64 {
        (0..m)
            .map(|i| (estimated.regime(perm[i]).coef() - truth.regime(i).coef()).norm_squared())
            .sum()
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    // lexicographic order, so ties resolve to the identity first
    for perm in (0..m).permutations(m) {
        let c = cost(&perm);
        if best.as_ref().map_or(true, |(b, _)| c < *b) {
            best = Some((c, perm));
        }
    }
    Ok(best.map(|(_, p)| p).unwrap_or_default())
}

/// Support-recovery summary of one aligned estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Every truly nonzero penalized parameter is estimated as nonzero.
    pub true_model_included: bool,
    /// Nonzero penalized estimates.
    pub selected: usize,
    /// Correctly nonzero over truly nonzero.
    pub share_nonzero: f64,
    pub truly_nonzero: usize,
}

/// Compares penalized parameters (VAR coefficients and off-diagonal precision entries).
pub fn selection_metrics(estimated: &MsVarModel, truth: &MsVarModel) -> Result<Selection> {
    if estimated.spec() != truth.spec() {
        return Err(Error::Dimension("estimated and true models have different specs".into()));
    }
    let est = flatten(estimated);
    let tru = flatten(truth);
    let (mut selected, mut truly, mut hit) = (0, 0, 0);
    for ((slot, e), (_, t)) in est.iter().zip(tru.iter()) {
        if !slot.block.is_penalized() {
            continue;
        }
        let e_nz = e.abs() > NONZERO_TOL;
        let t_nz = t.abs() > NONZERO_TOL;
        selected += usize::from(e_nz);
        truly += usize::from(t_nz);
        hit += usize::from(e_nz && t_nz);
    }
    Ok(Selection {
        true_model_included: hit == truly,
        selected,
        share_nonzero: if truly == 0 { 1.0 } else { hit as f64 / truly as f64 },
        truly_nonzero: truly,
    })
}

/// Squared Euclidean distances between an aligned estimate and the truth, per block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SquaredErrors {
    /// All VAR coefficients (own lags, exogenous lags, intercepts).
    pub var: f64,
    /// Unique covariance entries `Σ(s)_mn`, `m ≥ n`.
    pub cov: f64,
    /// Transition probabilities.
    pub p: f64,
}

impl SquaredErrors {
    pub fn total(&self) -> f64 {
        self.var + self.cov + self.p
    }
}

pub fn squared_errors(estimated: &MsVarModel, truth: &MsVarModel) -> Result<SquaredErrors> {
    if estimated.spec() != truth.spec() {
        return Err(Error::Dimension("estimated and true models have different specs".into()));
    }
    let mut out = SquaredErrors::default();
    for (e, t) in estimated.regimes().iter().zip(truth.regimes()) {
        out.var += (e.coef() - t.coef()).norm_squared();
        let (se, st) = (e.covariance(), t.covariance());
        for n in 0..se.ncols() {
            for m in n..se.nrows() {
                out.cov += (se[(m, n)] - st[(m, n)]).powi(2);
            }
        }
    }
    out.p = (estimated.trans() - truth.trans()).norm_squared();
    Ok(out)
}

/// `sqrt(mean_i ‖φ̂(i) − φ*‖²)` over replications, per block.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rmse {
    pub total: f64,
    pub var: f64,
    pub cov: f64,
    pub p: f64,
}

pub fn rmse_from_errors(errors: &[SquaredErrors]) -> Result<Rmse> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("RMSE needs at least one replication".into()));
    }
    let n = errors.len() as f64;
    let mean = |f: &dyn Fn(&SquaredErrors) -> f64| (errors.iter().map(f).sum::<f64>() / n).sqrt();
    Ok(Rmse {
        total: mean(&|e| e.total()),
        var: mean(&|e| e.var),
        cov: mean(&|e| e.cov),
        p: mean(&|e| e.p),
    })
}

/// RMSE of already aligned estimates against a common truth.
pub fn rmse_metrics(fits: &[MsVarModel], truth: &MsVarModel) -> Result<Rmse> {
    let errors = fits.iter().map(|f| squared_errors(f, truth)).collect::<Result<Vec<_>>>()?;
    rmse_from_errors(&errors)
}

/// Everything recorded for one Monte Carlo replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub selection: Selection,
    pub errors: SquaredErrors,
    pub permutation: Vec<usize>,
}

/// Aligns an estimate to the truth and evaluates it.
pub fn evaluate(estimated: &MsVarModel, truth: &MsVarModel) -> Result<ReplicationReport> {
    let permutation = align_states(estimated, truth)?;
    let aligned = estimated.permute_states(&permutation)?;
    Ok(ReplicationReport {
        selection: selection_metrics(&aligned, truth)?,
        errors: squared_errors(&aligned, truth)?,
        permutation,
    })
}

/// Aggregate over replications, laid out like one cell of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub replications: usize,
    pub true_model_included: f64,
    pub selected: f64,
    pub share_nonzero: f64,
    pub rmse: Rmse,
}

pub fn summarize(reports: &[ReplicationReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no successful replications to summarize".into()));
    }
    let n = reports.len() as f64;
    let errors: Vec<SquaredErrors> = reports.iter().map(|r| r.errors).collect();
    Ok(Summary {
        replications: reports.len(),
        true_model_included: reports.iter().filter(|r| r.selection.true_model_included).count() as f64 / n,
        selected: reports.iter().map(|r| r.selection.selected as f64).sum::<f64>() / n,
        share_nonzero: reports.iter().map(|r| r.selection.share_nonzero).sum::<f64>() / n,
        rmse: rmse_from_errors(&errors)?,
    })
}

/// Number of penalized parameters that are nonzero in `model`.
pub fn count_selected(model: &MsVarModel) -> usize {
    flatten(model)
        .iter()
        .filter(|(slot, v)| matches!(slot.block, Block::OwnLag | Block::Exogenous | Block::PrecisionOffDiag) && v.abs() > NONZERO_TOL)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{unflatten, RegimeParams};
    use crate::simulate::{dgp, Experiment};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(model: &MsVarModel, sd: f64, seed: u64) -> MsVarModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = *model.spec();
        let regimes = model
            .regimes()
            .iter()
            .map(|r| {
                let c = r.coef().map(|v| v + rng.gen_range(-sd..sd));
                RegimeParams::new(&spec, c, r.precision().clone()).unwrap()
            })
            .collect();
        MsVarModel::new(spec, regimes, model.trans().clone(), model.init().clone()).unwrap()
    }

    fn with_coefs(model: &MsVarModel, f: impl Fn(usize, &DMatrix<f64>) -> DMatrix<f64>) -> MsVarModel {
        let spec = *model.spec();
        let regimes = model
            .regimes()
            .iter()
            .enumerate()
            .map(|(s, r)| RegimeParams::new(&spec, f(s, r.coef()), r.precision().clone()).unwrap())
            .collect();
        MsVarModel::new(spec, regimes, model.trans().clone(), model.init().clone()).unwrap()
    }

    #[test]
    fn alignment_cases() {
        let truth = dgp(Experiment::One, 10).unwrap();
        assert_eq!(align_states(&truth, &truth).unwrap(), vec![0, 1]);
        let swapped = truth.permute_states(&[1, 0]).unwrap();
        let perm = align_states(&swapped, &truth).unwrap();
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(swapped.permute_states(&perm).unwrap(), truth);
    }

    #[test]
    fn alignment_agrees_with_trace_sign_heuristic() {
        let truth = dgp(Experiment::One, 10).unwrap();
        let spec = *truth.spec();
        for seed in 0..20 {
            let mut est = noisy(&truth, 0.3, seed);
            if seed % 2 == 1 {
                est = est.permute_states(&[1, 0]).unwrap();
            }
            let perm = align_states(&est, &truth).unwrap();
            // heuristic: the regime with positive trace of its lag matrix is truth's regime 0
            let positive = (0..2).find(|&s| est.regime(s).own_lag(&spec, 0).trace() > 0.0).unwrap();
            assert_eq!(perm[0], positive);
        }
    }

    #[test]
    fn selection_cases() {
        let truth = dgp(Experiment::One, 10).unwrap();
        let s = selection_metrics(&truth, &truth).unwrap();
        assert_eq!(s, Selection { true_model_included: true, selected: 20, share_nonzero: 1.0, truly_nonzero: 20 });

        let zero = with_coefs(&truth, |_, c| DMatrix::zeros(c.nrows(), c.ncols()));
        let s = selection_metrics(&zero, &truth).unwrap();
        assert!(!s.true_model_included);
        assert_eq!((s.selected, s.share_nonzero), (0, 0.0));

        // drop one true coefficient, add two spurious ones
        let edited = with_coefs(&truth, |s, c| {
            let mut c = c.clone();
            if s == 0 {
                c[(0, 0)] = 0.0;
                c[(1, 0)] = 0.1;
                c[(2, 0)] = -0.1;
            }
            c
        });
        let s = selection_metrics(&edited, &truth).unwrap();
        assert!(!s.true_model_included);
        assert_eq!(s.selected, 21);
        assert!((s.share_nonzero - 19.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn selection_on_truth_for_every_design() {
        for exp in [Experiment::One, Experiment::Two, Experiment::Three] {
            for d in [10, 16] {
                let truth = dgp(exp, d).unwrap();
                let s = selection_metrics(&truth, &truth).unwrap();
                assert!(s.true_model_included);
                assert_eq!(s.selected, s.truly_nonzero);
                assert_eq!(s.selected, count_selected(&truth));
                assert_eq!(s.share_nonzero, 1.0);
            }
        }
    }

    #[test]
    fn rmse_cases() {
        let truth = dgp(Experiment::One, 4).unwrap();
        let r = rmse_metrics(&[truth.clone(), truth.clone()], &truth).unwrap();
        assert_eq!(r, Rmse::default());
        // one replication with squared distance 4 in the VAR block
        let shifted = with_coefs(&truth, |s, c| {
            let mut c = c.clone();
            if s == 0 {
                c[(0, 0)] += 2.0;
            }
            c
        });
        let r = rmse_metrics(&[shifted], &truth).unwrap();
        assert!((r.var - 2.0).abs() < 1e-15 && (r.total - 2.0).abs() < 1e-15);
        assert!(rmse_metrics(&[], &truth).is_err());
    }

    #[test]
    fn covariance_block_uses_unique_entries() {
        let spec = crate::model::ModelSpec::new(1, 1, 2);
        let values = |q21: f64| vec![0.0, 0.0, 0.0, 0.0, q21, 1.0, 1.0, 1.0, 1.0];
        let a = unflatten(&values(0.0), &spec).unwrap();
        let b = unflatten(&values(0.5), &spec).unwrap();
        let e = squared_errors(&b, &a).unwrap();
        let sb = b.regime(0).covariance();
        let expected = (sb[(0, 0)] - 1.0).powi(2) + sb[(1, 0)].powi(2) + (sb[(1, 1)] - 1.0).powi(2);
        assert!((e.cov - expected).abs() < 1e-14);
        assert_eq!(e.var, 0.0);
        assert_eq!(e.p, 0.0);
        let _ = DVector::<f64>::zeros(1);
    }

    #[test]
    fn summary_averages() {
        let truth = dgp(Experiment::One, 4).unwrap();
        let good = evaluate(&truth, &truth).unwrap();
        let zero = with_coefs(&truth, |_, c| DMatrix::zeros(c.nrows(), c.ncols()));
        let bad = evaluate(&zero, &truth).unwrap();
        let s = summarize(&[good, bad]).unwrap();
        assert_eq!(s.replications, 2);
        assert_eq!(s.true_model_included, 0.5);
        assert_eq!(s.selected, 4.0);
        assert_eq!(s.share_nonzero, 0.5);
    }

    proptest! {
        #[test]
        fn metrics_invariant_to_relabelling(seed in any::<u64>(), swap in any::<bool>()) {
            let truth = dgp(Experiment::One, 4).unwrap();
            let est = noisy(&truth, 0.4, seed);
            let presented = if swap { est.permute_states(&[1, 0]).unwrap() } else { est.clone() };
            let truth_presented = if swap { truth.permute_states(&[1, 0]).unwrap() } else { truth.clone() };
            let a = evaluate(&est, &truth).unwrap();
            let b = evaluate(&presented, &truth).unwrap();
            let c = evaluate(&presented, &truth_presented).unwrap();
            prop_assert_eq!(a.selection, b.selection);
            prop_assert!((a.errors.total() - b.errors.total()).abs() < 1e-12);
            prop_assert!((a.errors.total() - c.errors.total()).abs() < 1e-12);
        }
    }
}
