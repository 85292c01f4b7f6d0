//! K-fold cross-validation for the three penalty levels.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{iv_lasso_problem, moment_loss};
use crate::lasso::{solve_quadratic_lasso, QuadraticLassoProblem};
use crate::matrices::{estimate_precision_nodewise, threshold_cross_moment, CrossMomentEstimate, PrecisionEstimate};
use crate::model::{IVDataset, TuningConfig};

/// Mean held-out losses closer than this count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CVConfig {
    pub folds: usize,
    /// Candidate penalties, ascending. `None` selects the default log grid.
    pub grid: Option<Vec<f64>>,
    pub grid_size: usize,
    /// Smallest default candidate as a fraction of `λ_max`.
    pub grid_ratio: f64,
    pub seed: u64,
    /// Refit Θ̂ and M̂ on each training split (otherwise fit once on all rows).
    pub refit_per_fold: bool,
}

impl Default for CVConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            grid: None,
            grid_size: 30,
            grid_ratio: 1e-3,
            seed: 0,
            refit_per_fold: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CVResult {
    pub chosen_lambda: f64,
    pub grid: Vec<f64>,
    /// Mean held-out loss per grid candidate.
    pub cv_curve: Vec<f64>,
    /// Fold index of every row.
    pub fold_assignment: Vec<usize>,
}

/// `count` log-spaced values from `max·ratio` to `max`, ascending.
pub fn log_grid(max: f64, count: usize, ratio: f64) -> Vec<f64> {
    if count <= 1 {
        return vec![max];
    }
    let (lo, hi) = ((max * ratio).ln(), max.ln());
    (0..count)
        .map(|i| {
            if i == count - 1 {
                max
            } else {
                (lo + (hi - lo) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

/// Random balanced partition of `0..n` into `folds` groups.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::CrossValidation(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(Error::CrossValidation(format!(
            "{folds} folds over {n} rows leaves a fold with no held-out rows"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        assignment[row] = pos % folds;
    }
    Ok(assignment)
}

fn split(assignment: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..assignment.len()).partition(|&i| assignment[i] != fold)
}

fn resolve_grid(cv: &CVConfig, lambda_max: f64) -> Result<Vec<f64>> {
    let grid = match &cv.grid {
        Some(g) => g.clone(),
        None => {
            let top = if lambda_max > 0.0 { lambda_max } else { 1.0 };
            log_grid(top, cv.grid_size, cv.grid_ratio)
        }
    };
    if grid.is_empty() {
        return Err(Error::CrossValidation("empty candidate grid".into()));
    }
    if grid.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::CrossValidation("grid values must be finite and > 0".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::CrossValidation("grid must be strictly increasing".into()));
    }
    Ok(grid)
}

/// Index of the minimal loss; near-ties go to the larger penalty.
pub fn select_candidate(curve: &[f64]) -> usize {
    let min = curve.iter().copied().fold(f64::INFINITY, f64::min);
    (0..curve.len())
        .rev()
        .find(|&i| curve[i] <= min + TIE_TOLERANCE)
        .unwrap_or(0)
}

/// Mean over folds of per-fold loss vectors.
fn average(per_fold: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let k = per_fold.len() as f64;
    (0..len)
        .map(|i| per_fold.iter().map(|f| f[i]).sum::<f64>() / k)
        .collect()
}

/// Penalty of the IV Lasso chosen by held-out moment loss.
///
/// For fold `k` the matrices and β̃ are fit on the other folds and scored by
/// `(Z_kᵀY_k/n_k − M̂β̃)ᵀΘ̂(Z_kᵀY_k/n_k − M̂β̃)`. Θ̂ and M̂ use
/// `tuning.lambda_node` and `tuning.c0`.
pub fn cv_iv_lasso_lambda(data: &IVDataset, cv: &CVConfig, tuning: &TuningConfig) -> Result<CVResult> {
    let assignment = fold_assignment(data.n(), cv.folds, cv.seed)?;
    let full = if cv.refit_per_fold && cv.grid.is_some() {
        None
    } else {
        Some(fit_matrices(data, tuning)?)
    };
    let grid = match (&cv.grid, &full) {
        (Some(_), _) => resolve_grid(cv, 0.0)?,
        (None, Some((theta, m))) => resolve_grid(cv, iv_lasso_problem(data, theta, m, 0.0)?.lambda_max())?,
        (None, None) => unreachable!(),
    };

    let per_fold = (0..cv.folds)
        .into_par_iter()
        .map(|fold| -> Result<Vec<f64>> {
            let (train_rows, test_rows) = split(&assignment, fold);
            let train = data.select_rows(&train_rows)?;
            let test = data.select_rows(&test_rows)?;
            let owned;
            let (theta, m) = match (&full, cv.refit_per_fold) {
                (Some(pair), false) => (&pair.0, &pair.1),
                _ => {
                    owned = fit_matrices(&train, tuning)?;
                    (&owned.0, &owned.1)
                }
            };
            let moment = test.instrument_moment();
            let base = iv_lasso_problem(&train, theta, m, 0.0)?;
            path_losses(&base, &grid, tuning, |beta| moment_loss(theta, m, &moment, beta))
        })
        .collect::<Result<Vec<_>>>()?;

    let cv_curve = average(per_fold, grid.len());
    Ok(CVResult {
        chosen_lambda: grid[select_candidate(&cv_curve)],
        grid,
        cv_curve,
        fold_assignment: assignment,
    })
}

fn fit_matrices(data: &IVDataset, tuning: &TuningConfig) -> Result<(PrecisionEstimate, CrossMomentEstimate)> {
    Ok((
        estimate_precision_nodewise(data.z(), tuning.lambda_node, tuning)?,
        threshold_cross_moment(data.z(), data.x(), tuning.c0)?,
    ))
}

/// Solves along the grid from the largest penalty down with warm starts and
/// scores each solution. Non-converged iterates are scored as they are.
fn path_losses(
    base: &QuadraticLassoProblem,
    grid: &[f64],
    tuning: &TuningConfig,
    loss: impl Fn(&DVector<f64>) -> f64,
) -> Result<Vec<f64>> {
    let mut losses = vec![0.0; grid.len()];
    let mut warm: Option<DVector<f64>> = None;
    for (i, &lambda) in grid.iter().enumerate().rev() {
        let prob = QuadraticLassoProblem::new(base.gram().clone(), base.linear().clone(), lambda)?;
        let fit = solve_quadratic_lasso(&prob, warm.as_ref(), tuning)?;
        losses[i] = loss(&fit.coefficients);
        warm = Some(fit.coefficients);
    }
    Ok(losses)
}

/// How the training Gram of a nodewise regression is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramScale {
    /// `AᵀA / n_rows`: the objective averages over rows (nodewise Θ̂ on Z).
    Mean,
    /// `AᵀA` rescaled to the full row count: the objective sums over rows
    /// (nodewise Θ̂ᴹ on `B = Θ̂^{1/2}M̂`).
    Sum,
}

fn training_gram(a: &DMatrix<f64>, total_rows: usize, scale: GramScale) -> DMatrix<f64> {
    let g = a.tr_mul(a);
    let g = (&g + g.transpose()) * 0.5;
    match scale {
        GramScale::Mean => g / a.nrows() as f64,
        GramScale::Sum => g * (total_rows as f64 / a.nrows() as f64),
    }
}

/// Largest useful nodewise penalty: `max_{j≠k} |G_jk|`.
pub fn nodewise_lambda_max(gram: &DMatrix<f64>) -> f64 {
    let d = gram.nrows();
    let mut best = 0.0f64;
    for j in 0..d {
        for k in 0..d {
            if j != k {
                best = best.max(gram[(j, k)].abs());
            }
        }
    }
    best
}

/// One penalty shared by all nodewise regressions of the columns of `a`,
/// chosen by the summed held-out squared error over all nodes.
pub fn cv_nodewise_lambda(
    a: &DMatrix<f64>,
    cv: &CVConfig,
    scale: GramScale,
    tuning: &TuningConfig,
) -> Result<CVResult> {
    let (n, d) = a.shape();
    if d < 2 {
        return Err(Error::CrossValidation(format!("need at least 2 columns, got {d}")));
    }
    let assignment = fold_assignment(n, cv.folds, cv.seed)?;
    let grid = match &cv.grid {
        Some(_) => resolve_grid(cv, 0.0)?,
        None => resolve_grid(cv, nodewise_lambda_max(&training_gram(a, n, scale)))?,
    };

    let per_fold = (0..cv.folds)
        .into_par_iter()
        .map(|fold| -> Result<Vec<f64>> {
            let (train_rows, test_rows) = split(&assignment, fold);
            let train = a.select_rows(&train_rows);
            let test = a.select_rows(&test_rows);
            let gram = training_gram(&train, n, scale);
            let mut losses = vec![0.0; grid.len()];
            for j in 0..d {
                let idx: Vec<usize> = (0..d).filter(|&k| k != j).collect();
                let q = gram.select_rows(&idx).select_columns(&idx);
                let c = DVector::from_iterator(idx.len(), idx.iter().map(|&k| gram[(k, j)]));
                let test_others = test.select_columns(&idx);
                let test_target = test.column(j);
                let base = QuadraticLassoProblem::new(q, c, 0.0)?;
                let node = path_losses(&base, &grid, tuning, |gamma| {
                    (test_target - &test_others * gamma).norm_squared() / test.nrows() as f64
                })?;
                for (acc, l) in losses.iter_mut().zip(node) {
                    *acc += l;
                }
            }
            Ok(losses)
        })
        .collect::<Result<Vec<_>>>()?;

    let cv_curve = average(per_fold, grid.len());
    Ok(CVResult {
        chosen_lambda: grid[select_candidate(&cv_curve)],
        grid,
        cv_curve,
        fold_assignment: assignment,
    })
}

/// Penalties chosen in sequence: `λ_node` on Z, then `λ_node_m` on
/// `B = Θ̂^{1/2}M̂` built with that `λ_node`, then `λ` for the IV Lasso.
#[derive(Debug, Clone)]
pub struct TuningReport {
    pub tuning: TuningConfig,
    pub node: CVResult,
    pub node_m: CVResult,
    pub iv_lasso: CVResult,
}

pub fn tune_all(data: &IVDataset, cv: &CVConfig, base: &TuningConfig) -> Result<TuningReport> {
    let node = cv_nodewise_lambda(data.z(), cv, GramScale::Mean, base)?;
    let mut tuning = TuningConfig {
        lambda_node: node.chosen_lambda,
        ..*base
    };
    let theta = estimate_precision_nodewise(data.z(), tuning.lambda_node, &tuning)?;
    let m = threshold_cross_moment(data.z(), data.x(), tuning.c0)?;
    let b = &theta.theta_sqrt * &m.m_hat;
    let node_m = cv_nodewise_lambda(&b, cv, GramScale::Sum, &tuning)?;
    tuning.lambda_node_m = node_m.chosen_lambda;
    let iv_lasso = cv_iv_lasso_lambda(data, cv, &tuning)?;
    tuning.lambda = iv_lasso.chosen_lambda;
    Ok(TuningReport {
        tuning,
        node,
        node_m,
        iv_lasso,
    })
}
