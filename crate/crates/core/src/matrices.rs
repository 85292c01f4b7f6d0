//! Regularized matrix estimators: the nodewise precision estimate Θ̂, the
//! thresholded cross moment M̂ and the structural inverse Θ̂ᴹ ≈ (M̂ᵀΘ̂M̂)⁻¹.
//!
//! Both inverses are built by the same nodewise construction on a Gram
//! matrix `G` (`Σ̂ = ZᵀZ/n` for Θ̂, `BᵀB` with `B = Θ̂^{1/2}M̂` for Θ̂ᴹ): row
//! `j` regresses coordinate `j` on the others with an ℓ₁ penalty, and the
//! stationarity conditions of that Lasso give, row by row,
//!
//! ```text
//! ‖G Θⱼ − eⱼ‖∞ ≤ λ / τⱼ²
//! ```
//!
//! Each row's observed left side and its bound are stored as a
//! [`RowCertificate`] and checked before an estimate is returned.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lasso::{solve_quadratic_lasso, QuadraticLassoProblem};
use crate::model::TuningConfig;

/// Allowed excess of an observed certificate over its bound.
pub const CERTIFICATE_SLACK: f64 = 1e-8;

/// Eigenvalue floor used for the symmetric square root of Θ̂.
pub const SQRT_FLOOR: f64 = 1e-12;

/// `observed = ‖GΘⱼ − eⱼ‖∞` against `bound = λ/τⱼ²`.
///
/// Exact (unregularized) inverses carry an infinite bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RowCertificate {
    pub observed: f64,
    pub bound: f64,
}

impl RowCertificate {
    /// `bound − observed`; negative when the row is out of bound.
    pub fn slack(&self) -> f64 {
        self.bound - self.observed
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.observed <= self.bound + tol
    }
}

/// Nodewise estimate of `Θ = Σ⁻¹`.
#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    /// `q × q`; row `j` is `τ̂ⱼ⁻² Γ̂ⱼ`. Not symmetric in general.
    pub theta_hat: DMatrix<f64>,
    pub tau_sq: DVector<f64>,
    /// `γ̂ⱼ` indexed over `k ≠ j` in ascending order.
    pub gamma_hat: Vec<DVector<f64>>,
    pub certificates: Vec<RowCertificate>,
    pub lambda: f64,
    /// Symmetric PSD square root of `(Θ̂ + Θ̂ᵀ)/2` after eigenvalue flooring.
    pub theta_sqrt: DMatrix<f64>,
    /// Number of eigenvalues of `(Θ̂ + Θ̂ᵀ)/2` raised to the floor.
    pub floored_eigenvalues: usize,
}

impl PrecisionEstimate {
    pub fn dim(&self) -> usize {
        self.theta_hat.nrows()
    }

    /// `(Θ̂ + Θ̂ᵀ)/2`.
    pub fn theta_sym(&self) -> DMatrix<f64> {
        symmetrize(&self.theta_hat)
    }

    /// `Θ̂^{1/2} Θ̂^{1/2}`, the PSD projection of the symmetrized estimate.
    pub fn theta_psd(&self) -> DMatrix<f64> {
        &self.theta_sqrt * &self.theta_sqrt
    }
}

/// Thresholded empirical cross moment.
#[derive(Debug, Clone)]
pub struct CrossMomentEstimate {
    /// `ZᵀX / n`.
    pub m_tilde: DMatrix<f64>,
    pub m_hat: DMatrix<f64>,
    pub threshold: f64,
    pub kept_count: usize,
}

/// Nodewise estimate of `(M̂ᵀΘ̂M̂)⁻¹`.
#[derive(Debug, Clone)]
pub struct StructuralInverseEstimate {
    /// `p × p`; row `j` is `τ̃ⱼ⁻² Γ̃ⱼ`.
    pub theta_m_hat: DMatrix<f64>,
    pub tau_tilde_sq: DVector<f64>,
    pub gamma_tilde: Vec<DVector<f64>>,
    /// Against `BᵀB = M̂ᵀΘ̂^{1/2}Θ̂^{1/2}M̂`, the Gram the nodewise Lassos minimized.
    pub certificates: Vec<RowCertificate>,
    /// Observed `‖M̂ᵀΘ̂_sym M̂ Θ̂ᴹⱼ − eⱼ‖∞` with the unprojected symmetric part.
    pub observed_sym: Vec<f64>,
    /// Observed `‖M̂ᵀΘ̂M̂ Θ̂ᴹⱼ − eⱼ‖∞` with the raw asymmetric Θ̂.
    pub observed_raw: Vec<f64>,
    pub lambda: f64,
}

/// Symmetric PSD square root and how many eigenvalues were floored.
#[derive(Debug, Clone)]
pub struct PsdSqrt {
    pub root: DMatrix<f64>,
    pub floored: usize,
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Output of the shared nodewise construction on a Gram matrix.
struct Nodewise {
    theta: DMatrix<f64>,
    tau_sq: DVector<f64>,
    gammas: Vec<DVector<f64>>,
    certificates: Vec<RowCertificate>,
}

fn others(d: usize, j: usize) -> Vec<usize> {
    (0..d).filter(|&k| k != j).collect()
}

/// Nodewise inversion of `gram` with one shared penalty.
///
/// Node `j` solves `min_γ (G_jj − 2G_{j,−j}γ + γᵀG_{−j,−j}γ) + 2λ‖γ‖₁`,
/// then `Γⱼ = (1 at j, −γ elsewhere)`, `τⱼ² = ΓⱼᵀGΓⱼ + λ‖γ‖₁` and
/// `Θⱼ = Γⱼ/τⱼ²`. Nodes are solved in parallel; each writes only its own row.
fn nodewise_inverse(
    gram: &DMatrix<f64>,
    lambda: f64,
    config: &TuningConfig,
    estimate: &'static str,
) -> Result<Nodewise> {
    let d = gram.nrows();
    let rows: Vec<(DVector<f64>, DVector<f64>, f64)> = (0..d)
        .into_par_iter()
        .map(|j| -> Result<_> {
            let idx = others(d, j);
            let gamma = if idx.is_empty() {
                DVector::zeros(0)
            } else {
                let q = gram.select_rows(&idx).select_columns(&idx);
                let c = DVector::from_iterator(idx.len(), idx.iter().map(|&k| gram[(k, j)]));
                let prob = QuadraticLassoProblem::new(q, c, lambda)?;
                solve_quadratic_lasso(&prob, None, config)?
                    .require_converged()?
                    .coefficients
            };
            let mut big_gamma = DVector::zeros(d);
            big_gamma[j] = 1.0;
            for (k, &i) in idx.iter().enumerate() {
                big_gamma[i] = -gamma[k];
            }
            let tau_sq = big_gamma.dot(&(gram * &big_gamma)) + lambda * gamma.lp_norm(1);
            if !(tau_sq > 0.0) || !tau_sq.is_finite() {
                return Err(Error::DegenerateNode { index: j, tau_sq });
            }
            Ok((gamma, big_gamma / tau_sq, tau_sq))
        })
        .collect::<Result<_>>()?;

    let mut theta = DMatrix::zeros(d, d);
    let mut tau_sq = DVector::zeros(d);
    let mut gammas = Vec::with_capacity(d);
    for (j, (gamma, row, t)) in rows.into_iter().enumerate() {
        theta.set_row(j, &row.transpose());
        tau_sq[j] = t;
        gammas.push(gamma);
    }
    let observed = certificate_observed(gram, &theta);
    let certificates: Vec<RowCertificate> = observed
        .iter()
        .enumerate()
        .map(|(j, &obs)| RowCertificate {
            observed: obs,
            bound: lambda / tau_sq[j],
        })
        .collect();
    for (row, cert) in certificates.iter().enumerate() {
        if !cert.holds(CERTIFICATE_SLACK) {
            return Err(Error::CertificateViolated {
                estimate,
                row,
                observed: cert.observed,
                bound: cert.bound,
            });
        }
    }
    Ok(Nodewise {
        theta,
        tau_sq,
        gammas,
        certificates,
    })
}

/// `‖G Θⱼ − eⱼ‖∞` for every row `Θⱼ` of `theta`.
pub fn certificate_observed(gram: &DMatrix<f64>, theta: &DMatrix<f64>) -> Vec<f64> {
    // column j of G Θᵀ is G Θⱼ
    let prod = gram * theta.transpose();
    (0..theta.nrows())
        .map(|j| {
            let mut col = prod.column(j).clone_owned();
            col[j] -= 1.0;
            col.amax()
        })
        .collect()
}

/// Nodewise Lasso estimate of `Σ⁻¹` from the instruments.
pub fn estimate_precision_nodewise(
    z: &DMatrix<f64>,
    lambda_node: f64,
    config: &TuningConfig,
) -> Result<PrecisionEstimate> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 rows, got {n}")));
    }
    if let Some(j) = (0..z.ncols()).find(|&j| z.column(j).iter().all(|v| *v == 0.0)) {
        return Err(Error::DegenerateNode { index: j, tau_sq: 0.0 });
    }
    let sigma_hat = z.tr_mul(z) / n as f64;
    precision_from_gram(&sigma_hat, lambda_node, config)
}

/// As [`estimate_precision_nodewise`] with the sample covariance given directly.
pub fn precision_from_gram(
    sigma_hat: &DMatrix<f64>,
    lambda_node: f64,
    config: &TuningConfig,
) -> Result<PrecisionEstimate> {
    let nw = nodewise_inverse(sigma_hat, lambda_node, config, "theta")?;
    let sqrt = symmetric_psd_sqrt(&nw.theta, SQRT_FLOOR)?;
    Ok(PrecisionEstimate {
        theta_hat: nw.theta,
        tau_sq: nw.tau_sq,
        gamma_hat: nw.gammas,
        certificates: nw.certificates,
        lambda: lambda_node,
        theta_sqrt: sqrt.root,
        floored_eigenvalues: sqrt.floored,
    })
}

/// Hard thresholding of `ZᵀX/n` at `c0·√(ln q / n)`.
pub fn threshold_cross_moment(z: &DMatrix<f64>, x: &DMatrix<f64>, c0: f64) -> Result<CrossMomentEstimate> {
    let n = z.nrows();
    if x.nrows() != n {
        return Err(Error::RowMismatch(format!("Z has {n} rows, X has {}", x.nrows())));
    }
    if !(c0 >= 0.0) {
        return Err(Error::Validation(format!("c0 must be >= 0, got {c0}")));
    }
    let m_tilde = z.tr_mul(x) / n as f64;
    Ok(threshold_matrix(m_tilde, c0, z.ncols(), n))
}

/// Thresholds a precomputed cross moment with `q` instruments and `n` rows.
pub fn threshold_matrix(m_tilde: DMatrix<f64>, c0: f64, q: usize, n: usize) -> CrossMomentEstimate {
    let threshold = c0 * ((q as f64).ln() / n as f64).sqrt();
    let m_hat = m_tilde.map(|v| if v.abs() >= threshold { v } else { 0.0 });
    let kept_count = m_hat.iter().filter(|v| **v != 0.0).count();
    CrossMomentEstimate {
        m_tilde,
        m_hat,
        threshold,
        kept_count,
    }
}

/// `V·diag(max(λ, floor))^{1/2}·Vᵀ` from the eigendecomposition of `(A + Aᵀ)/2`.
pub fn symmetric_psd_sqrt(a: &DMatrix<f64>, floor: f64) -> Result<PsdSqrt> {
    if !a.is_square() {
        return Err(Error::Validation(format!(
            "square root of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let sym = symmetrize(a);
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Singular("symmetric eigendecomposition did not converge".into()))?;
    let mut floored = 0;
    let roots = eig.eigenvalues.map(|v| {
        if v < floor {
            floored += 1;
            floor.sqrt()
        } else {
            v.sqrt()
        }
    });
    let v = &eig.eigenvectors;
    let root = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok(PsdSqrt {
        root: symmetrize(&root),
        floored,
    })
}

/// Nodewise estimate of `(M̂ᵀΘ̂M̂)⁻¹` on `B = Θ̂^{1/2}M̂`.
pub fn estimate_structural_inverse(
    theta: &PrecisionEstimate,
    m: &CrossMomentEstimate,
    lambda_node_m: f64,
    config: &TuningConfig,
) -> Result<StructuralInverseEstimate> {
    if theta.dim() != m.m_hat.nrows() {
        return Err(Error::Validation(format!(
            "Theta is {q}x{q} but M has {} rows",
            m.m_hat.nrows(),
            q = theta.dim()
        )));
    }
    let b = &theta.theta_sqrt * &m.m_hat;
    let gram = symmetrize(&b.tr_mul(&b));
    let nw = nodewise_inverse(&gram, lambda_node_m, config, "theta_m")?;
    let sym_gram = m.m_hat.tr_mul(&(theta.theta_sym() * &m.m_hat));
    let raw_gram = m.m_hat.tr_mul(&(&theta.theta_hat * &m.m_hat));
    Ok(StructuralInverseEstimate {
        observed_sym: certificate_observed(&sym_gram, &nw.theta),
        observed_raw: certificate_observed(&raw_gram, &nw.theta),
        theta_m_hat: nw.theta,
        tau_tilde_sq: nw.tau_sq,
        gamma_tilde: nw.gammas,
        certificates: nw.certificates,
        lambda: lambda_node_m,
    })
}

/// Largest admissible condition number for the unregularized path.
pub const MAX_CONDITION: f64 = 1e12;

fn checked_spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = symmetrize(a);
    let eig = sym
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Singular(format!("{what}: eigendecomposition failed")))?;
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(Error::Singular(format!("{what}: eigenvalues in [{min:e}, {max:e}]")));
    }
    let inv = sym
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what}: Cholesky failed")))?
        .inverse();
    Ok(symmetrize(&inv))
}

/// The unregularized low-dimensional path: `Θ̂ = Σ̂⁻¹`, `M̂ = M̃`,
/// `Θ̂ᴹ = (M̃ᵀΣ̂⁻¹M̃)⁻¹`. Certificates carry an infinite bound.
pub fn exact_inverses(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<(PrecisionEstimate, CrossMomentEstimate, StructuralInverseEstimate)> {
    let (n, q, p) = (z.nrows(), z.ncols(), x.ncols());
    if x.nrows() != n {
        return Err(Error::RowMismatch(format!("Z has {n} rows, X has {}", x.nrows())));
    }
    if !(n > q && q >= p) {
        return Err(Error::Validation(format!(
            "exact path needs n > q >= p, got n = {n}, q = {q}, p = {p}"
        )));
    }
    let sigma_hat = z.tr_mul(z) / n as f64;
    let theta_hat = checked_spd_inverse(&sigma_hat, "sample covariance of Z")?;
    let m = threshold_matrix(z.tr_mul(x) / n as f64, 0.0, q, n);
    let gram = symmetrize(&m.m_tilde.tr_mul(&(&theta_hat * &m.m_tilde)));
    let theta_m_hat = checked_spd_inverse(&gram, "M'Theta M")?;

    let sqrt = symmetric_psd_sqrt(&theta_hat, SQRT_FLOOR)?;
    let theta = PrecisionEstimate {
        tau_sq: theta_hat.diagonal().map(|v| 1.0 / v),
        gamma_hat: implied_gammas(&theta_hat),
        certificates: exact_certificates(&sigma_hat, &theta_hat),
        theta_hat,
        lambda: 0.0,
        theta_sqrt: sqrt.root,
        floored_eigenvalues: sqrt.floored,
    };
    let observed_raw = certificate_observed(&gram, &theta_m_hat);
    let theta_m = StructuralInverseEstimate {
        tau_tilde_sq: theta_m_hat.diagonal().map(|v| 1.0 / v),
        gamma_tilde: implied_gammas(&theta_m_hat),
        certificates: exact_certificates(&gram, &theta_m_hat),
        observed_sym: observed_raw.clone(),
        observed_raw,
        theta_m_hat,
        lambda: 0.0,
    };
    Ok((theta, m, theta_m))
}

fn exact_certificates(gram: &DMatrix<f64>, inverse: &DMatrix<f64>) -> Vec<RowCertificate> {
    certificate_observed(gram, inverse)
        .into_iter()
        .map(|observed| RowCertificate {
            observed,
            bound: f64::INFINITY,
        })
        .collect()
}

/// Regression coefficients implied by an inverse: `γⱼ = −Θ_{j,−j}/Θ_jj`.
fn implied_gammas(theta: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let d = theta.nrows();
    (0..d)
        .map(|j| {
            let idx = others(d, j);
            DVector::from_iterator(idx.len(), idx.iter().map(|&k| -theta[(j, k)] / theta[(j, j)]))
        })
        .collect()
}
