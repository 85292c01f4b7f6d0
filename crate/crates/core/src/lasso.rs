//! ℓ₁-penalized quadratic problems solved by cyclic coordinate descent.
//!
//! Every Lasso in the estimator (the IV Lasso for β and both families of
//! nodewise regressions) is an instance of
//!
//! ```text
//! minimize  βᵀQβ − 2cᵀβ + 2λ Σ_j w_j |β_j|
//! ```
//!
//! with `Q` symmetric positive semidefinite. A regression Lasso with design
//! `A` (n rows) and response `b` maps to `Q = AᵀA/n`, `c = Aᵀb/n`.
//!
//! The optimality (KKT) conditions are, with `g = Qβ − c`,
//!
//! * `g_j + λ w_j sign(β_j) = 0` for `β_j ≠ 0`,
//! * `|g_j| ≤ λ w_j` for `β_j = 0`.
//!
//! [`check_kkt`] reports the largest violation of these conditions and is
//! the certificate attached to every [`LassoFit`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::TuningConfig;

/// `sign(z)·max(|z| − t, 0)`. Values on the kink (`|z| = t`) map to zero.
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// `(Q, c, λ, w)` for the objective `βᵀQβ − 2cᵀβ + 2λ Σ w_j|β_j|`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLassoProblem {
    q: DMatrix<f64>,
    c: DVector<f64>,
    lambda: f64,
    weights: Option<DVector<f64>>,
}

impl QuadraticLassoProblem {
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, lambda: f64) -> Result<Self> {
        let d = c.len();
        if q.nrows() != d || q.ncols() != d {
            return Err(Error::Validation(format!(
                "Gram is {}x{} but linear term has length {d}",
                q.nrows(),
                q.ncols()
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Validation(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        if q.iter().chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite entry in Gram or linear term".into()));
        }
        let scale = q.amax().max(1.0);
        for i in 0..d {
            if q[(i, i)] < 0.0 {
                return Err(Error::Validation(format!(
                    "negative Gram diagonal at {i}: {}",
                    q[(i, i)]
                )));
            }
            for j in 0..i {
                if (q[(i, j)] - q[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Validation(format!("Gram not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self {
            q,
            c,
            lambda,
            weights: None,
        })
    }

    /// Regression form: `Q = AᵀA/n`, `c = Aᵀb/n` where `n` is the row count of `A`.
    pub fn from_design(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Validation(format!(
                "design has {} rows but response has {}",
                a.nrows(),
                b.len()
            )));
        }
        let n = a.nrows().max(1) as f64;
        let q = a.tr_mul(a) / n;
        let c = a.tr_mul(b) / n;
        Self::new(q, c, lambda)
    }

    /// Per-coordinate penalty multipliers (default all one).
    pub fn with_weights(mut self, weights: DVector<f64>) -> Result<Self> {
        if weights.len() != self.c.len() {
            return Err(Error::Validation("weight vector length mismatch".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Validation("penalty weights must be >= 0".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Effective penalty `λ·w_j` of coordinate `j`.
    pub fn penalty(&self, j: usize) -> f64 {
        match &self.weights {
            Some(w) => self.lambda * w[j],
            None => self.lambda,
        }
    }

    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        self.objective_with(beta, &(&self.q * beta))
    }

    /// Objective given a precomputed `Qβ`.
    fn objective_with(&self, beta: &DVector<f64>, q_beta: &DVector<f64>) -> f64 {
        let quad = beta.dot(q_beta);
        let l1: f64 = beta.iter().enumerate().map(|(j, b)| self.penalty(j) * b.abs()).sum();
        quad - 2.0 * self.c.dot(beta) + 2.0 * l1
    }

    /// Smallest λ (with unit weights) at which β = 0 is optimal: `‖c‖∞`.
    pub fn lambda_max(&self) -> f64 {
        self.c.amax()
    }
}

/// Solution of a [`QuadraticLassoProblem`] with its optimality certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub coefficients: DVector<f64>,
    pub objective: f64,
    /// Largest coordinate-wise violation of the KKT conditions.
    pub kkt_residual: f64,
    pub sweeps_used: usize,
    pub converged: bool,
    /// Objective value after every sweep, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    /// Turns a non-converged fit into [`Error::NotConverged`].
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                sweeps: self.sweeps_used,
                kkt_residual: self.kkt_residual,
            })
        }
    }
}

/// Largest coordinate-wise violation of the KKT conditions at `beta`.
pub fn check_kkt(prob: &QuadraticLassoProblem, beta: &DVector<f64>) -> f64 {
    let grad = &prob.q * beta - &prob.c;
    kkt_from_gradient(prob, beta, &grad)
}

fn kkt_from_gradient(prob: &QuadraticLassoProblem, beta: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..beta.len() {
        let pen = prob.penalty(j);
        let v = if beta[j] > 0.0 {
            (grad[j] + pen).abs()
        } else if beta[j] < 0.0 {
            (grad[j] - pen).abs()
        } else {
            (grad[j].abs() - pen).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Cyclic coordinate descent in ascending index order.
///
/// Converges when a full sweep moves no coordinate by more than `config.tol`
/// and the KKT residual is below `10·config.tol`. The converged point is then
/// polished by solving the stationarity equations on its active set with the
/// signs held fixed; the polished point is kept only if the signs survive and
/// the certificate does not get worse.
///
/// Coordinates with `Q_jj = 0` are pinned to zero when `|c_j| ≤ λw_j`; they
/// make the problem unbounded otherwise.
///
/// Running out of sweeps is not an error here: the last iterate is returned
/// with `converged = false`.
pub fn solve_quadratic_lasso(
    prob: &QuadraticLassoProblem,
    warm_start: Option<&DVector<f64>>,
    config: &TuningConfig,
) -> Result<LassoFit> {
    let d = prob.dim();
    let q = &prob.q;
    let c = &prob.c;

    let mut pinned = vec![false; d];
    for j in 0..d {
        if q[(j, j)] <= 0.0 {
            let pen = prob.penalty(j);
            if c[j].abs() > pen {
                return Err(Error::UnboundedCoordinate {
                    index: j,
                    c: c[j],
                    penalty: pen,
                });
            }
            pinned[j] = true;
        }
    }

    let mut beta = match warm_start {
        Some(w) if w.len() == d => w.clone(),
        Some(w) => {
            return Err(Error::Validation(format!(
                "warm start has length {} but problem has dimension {d}",
                w.len()
            )))
        }
        None => DVector::zeros(d),
    };
    for j in 0..d {
        if pinned[j] {
            beta[j] = 0.0;
        }
    }

    let mut q_beta;
    let mut trace = vec![prob.objective(&beta)];
    let mut sweeps = 0usize;
    let mut converged = false;
    let mut kkt = f64::INFINITY;

    // One pass over `coords`; returns the largest coordinate change.
    let sweep = |coords: &mut dyn Iterator<Item = usize>, beta: &mut DVector<f64>, q_beta: &mut DVector<f64>| -> f64 {
        let mut max_change = 0.0f64;
        for j in coords {
            let qjj = q[(j, j)];
            let old = beta[j];
            let z = c[j] - q_beta[j] + qjj * old;
            let new = soft_threshold(z, prob.penalty(j)) / qjj;
            let delta = new - old;
            if delta != 0.0 {
                beta[j] = new;
                q_beta.axpy(delta, &q.column(j), 1.0);
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    };

    while sweeps < config.max_sweeps {
        // full sweep over every free coordinate, refreshing Qβ to limit drift
        q_beta = q * &beta;
        let change = sweep(&mut (0..d).filter(|&j| !pinned[j]), &mut beta, &mut q_beta);
        sweeps += 1;
        trace.push(prob.objective_with(&beta, &q_beta));
        if change < config.tol {
            q_beta = q * &beta;
            kkt = kkt_from_gradient(prob, &beta, &(&q_beta - c));
            if kkt < 10.0 * config.tol {
                converged = true;
                break;
            }
        }
        // inner sweeps restricted to the current active set
        let active: Vec<usize> = (0..d).filter(|&j| !pinned[j] && beta[j] != 0.0).collect();
        if active.is_empty() {
            continue;
        }
        let mut inner = 0;
        while sweeps < config.max_sweeps && inner < INNER_SWEEPS {
            let change = sweep(&mut active.iter().copied(), &mut beta, &mut q_beta);
            sweeps += 1;
            inner += 1;
            trace.push(prob.objective_with(&beta, &q_beta));
            if change < config.tol {
                break;
            }
        }
        if let Some(next) = subspace_step(prob, &beta) {
            beta = next;
            trace.push(prob.objective(&beta));
        }
    }

    if !converged {
        kkt = check_kkt(prob, &beta);
    } else if let Some((polished, polished_kkt)) = polish(prob, &beta, kkt) {
        beta = polished;
        kkt = polished_kkt;
        trace.push(prob.objective(&beta));
    }

    Ok(LassoFit {
        objective: prob.objective(&beta),
        coefficients: beta,
        kkt_residual: kkt,
        sweeps_used: sweeps,
        converged,
        objective_trace: trace,
    })
}

/// Active-set sweeps between two full sweeps before an exact subspace step.
const INNER_SWEEPS: usize = 25;

/// Moves toward the minimizer of the objective restricted to the current
/// support with signs held fixed, stopping at the first coordinate that would
/// change sign (set to zero there). The objective never increases.
fn subspace_step(prob: &QuadraticLassoProblem, beta: &DVector<f64>) -> Option<DVector<f64>> {
    let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    if active.is_empty() {
        return None;
    }
    let q_aa = prob.q.select_rows(&active).select_columns(&active);
    let rhs = DVector::from_iterator(
        active.len(),
        active.iter().map(|&j| prob.c[j] - prob.penalty(j) * beta[j].signum()),
    );
    let target = q_aa.cholesky()?.solve(&rhs);
    if target.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut t = 1.0f64;
    let mut blocking = None;
    for (k, &j) in active.iter().enumerate() {
        if target[k].signum() != beta[j].signum() || target[k] == 0.0 {
            let tk = beta[j] / (beta[j] - target[k]);
            if tk < t {
                t = tk;
                blocking = Some(j);
            }
        }
    }
    let mut out = beta.clone();
    for (k, &j) in active.iter().enumerate() {
        let v = beta[j] + t * (target[k] - beta[j]);
        out[j] = if v.signum() == beta[j].signum() { v } else { 0.0 };
    }
    if let Some(j) = blocking {
        out[j] = 0.0;
    }
    (prob.objective(&out) <= prob.objective(beta)).then_some(out)
}

/// Exact solve of `Q_AA β_A = c_A − λ w_A ∘ s_A` on the active set `A` with
/// signs `s`.
fn polish(prob: &QuadraticLassoProblem, beta: &DVector<f64>, current_kkt: f64) -> Option<(DVector<f64>, f64)> {
    let active: Vec<usize> = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect();
    if active.is_empty() {
        return None;
    }
    let q_aa = prob.q.select_rows(&active).select_columns(&active);
    let rhs = DVector::from_iterator(
        active.len(),
        active.iter().map(|&j| prob.c[j] - prob.penalty(j) * beta[j].signum()),
    );
    let solved = match q_aa.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => q_aa.lu().solve(&rhs)?,
    };
    if solved.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut out = beta.clone();
    for (k, &j) in active.iter().enumerate() {
        if solved[k].signum() != beta[j].signum() || solved[k] == 0.0 {
            return None;
        }
        out[j] = solved[k];
    }
    let new_kkt = check_kkt(prob, &out);
    (new_kkt <= current_kkt).then_some((out, new_kkt))
}
