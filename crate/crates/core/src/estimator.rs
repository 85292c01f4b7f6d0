//! IV Lasso β̃ and the desparsified estimator β̂.
//!
//! With `L = Θ̂ᴹM̂ᵀΘ̂` (p × q) the desparsified estimator is
//!
//! ```text
//! β̂ = L ZᵀY/n − (L ZᵀX/n − I) β̃
//! ```
//!
//! and for the true `(β⁰, U)` it satisfies the exact identity
//! `√n(β̂ − β⁰) = L ZᵀU/√n − Δ` with `Δ = √n (L ZᵀX/n − I)(β̃ − β⁰)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lasso::{solve_quadratic_lasso, LassoFit, QuadraticLassoProblem};
use crate::matrices::{
    estimate_precision_nodewise, estimate_structural_inverse, exact_inverses, symmetrize, threshold_cross_moment,
    CrossMomentEstimate, PrecisionEstimate, StructuralInverseEstimate,
};
use crate::model::{IVDataset, TuningConfig};

/// Quadratic form of the IV Lasso objective
/// `(ZᵀY/n − M̂β)ᵀΘ̂(ZᵀY/n − M̂β) + 2λ‖β‖₁`.
///
/// Θ̂ enters through `Θ̂^{1/2}Θ̂^{1/2}`, the PSD projection of its symmetric
/// part, which keeps the problem convex when the symmetrized nodewise
/// estimate has negative eigenvalues.
pub fn iv_lasso_problem(
    data: &IVDataset,
    theta: &PrecisionEstimate,
    m: &CrossMomentEstimate,
    lambda: f64,
) -> Result<QuadraticLassoProblem> {
    check_dims(data, theta, m)?;
    let b = &theta.theta_sqrt * &m.m_hat;
    let v = &theta.theta_sqrt * data.instrument_moment();
    let gram = symmetrize(&b.tr_mul(&b));
    QuadraticLassoProblem::new(gram, b.tr_mul(&v), lambda)
}

fn check_dims(data: &IVDataset, theta: &PrecisionEstimate, m: &CrossMomentEstimate) -> Result<()> {
    if theta.dim() != data.q() || m.m_hat.nrows() != data.q() || m.m_hat.ncols() != data.p() {
        return Err(Error::Validation(format!(
            "matrices ({q}x{q}, {}x{}) do not match data with q = {}, p = {}",
            m.m_hat.nrows(),
            m.m_hat.ncols(),
            data.q(),
            data.p(),
            q = theta.dim()
        )));
    }
    Ok(())
}

/// IV Lasso fit; fails when coordinate descent does not converge.
pub fn fit_iv_lasso(
    data: &IVDataset,
    theta: &PrecisionEstimate,
    m: &CrossMomentEstimate,
    lambda: f64,
    config: &TuningConfig,
) -> Result<LassoFit> {
    fit_iv_lasso_warm(data, theta, m, lambda, None, config)
}

pub fn fit_iv_lasso_warm(
    data: &IVDataset,
    theta: &PrecisionEstimate,
    m: &CrossMomentEstimate,
    lambda: f64,
    warm_start: Option<&DVector<f64>>,
    config: &TuningConfig,
) -> Result<LassoFit> {
    let prob = iv_lasso_problem(data, theta, m, lambda)?;
    solve_quadratic_lasso(&prob, warm_start, config)?.require_converged()
}

/// `(v − M̂β)ᵀΘ̂(v − M̂β)` for a moment vector `v`.
pub fn moment_loss(
    theta: &PrecisionEstimate,
    m: &CrossMomentEstimate,
    moment: &DVector<f64>,
    beta: &DVector<f64>,
) -> f64 {
    let r = moment - &m.m_hat * beta;
    r.dot(&(&theta.theta_hat * &r))
}

/// β̃, β̂ and the pieces inference reuses.
#[derive(Debug, Clone)]
pub struct EstimateBundle {
    pub beta_tilde: DVector<f64>,
    pub beta_hat: DVector<f64>,
    /// `L ZᵀX/n − I`.
    pub correction: DMatrix<f64>,
    /// `Y − Xβ̃`.
    pub residuals_hat: DVector<f64>,
    /// `L ZᵀY/n`.
    pub first_term: DVector<f64>,
    /// `L = Θ̂ᴹM̂ᵀΘ̂`.
    pub loading: DMatrix<f64>,
    pub theta_m_hat: DMatrix<f64>,
    pub n: usize,
}

impl EstimateBundle {
    pub fn p(&self) -> usize {
        self.beta_hat.len()
    }

    /// β̂ recomputed for another initial estimate; affine with slope `−correction`.
    pub fn desparsify_at(&self, beta_tilde: &DVector<f64>) -> DVector<f64> {
        &self.first_term - &self.correction * beta_tilde
    }
}

/// One-step correction of the IV Lasso.
pub fn desparsify(
    data: &IVDataset,
    beta_tilde: &DVector<f64>,
    theta: &PrecisionEstimate,
    m: &CrossMomentEstimate,
    theta_m: &StructuralInverseEstimate,
) -> Result<EstimateBundle> {
    check_dims(data, theta, m)?;
    let p = data.p();
    if beta_tilde.len() != p || theta_m.theta_m_hat.nrows() != p {
        return Err(Error::Validation(format!(
            "beta_tilde has length {}, Theta^M is {}x{}, expected p = {p}",
            beta_tilde.len(),
            theta_m.theta_m_hat.nrows(),
            theta_m.theta_m_hat.ncols()
        )));
    }
    let loading = &theta_m.theta_m_hat * m.m_hat.transpose() * &theta.theta_hat;
    let first_term = &loading * data.instrument_moment();
    let correction = &loading * data.cross_moment() - DMatrix::<f64>::identity(p, p);
    let beta_hat = &first_term - &correction * beta_tilde;
    let residuals_hat = data.y() - data.x() * beta_tilde;
    Ok(EstimateBundle {
        beta_tilde: beta_tilde.clone(),
        beta_hat,
        correction,
        residuals_hat,
        first_term,
        loading,
        theta_m_hat: theta_m.theta_m_hat.clone(),
        n: data.n(),
    })
}

/// Bias/noise split of `√n(β̂ − β⁰)` against known truth.
#[derive(Debug, Clone)]
pub struct DecompositionDiag {
    pub delta: DVector<f64>,
    /// `L ZᵀU/√n`.
    pub noise_term: DVector<f64>,
    /// `‖√n(β̂ − β⁰) − noise_term + Δ‖∞`.
    pub identity_residual: f64,
}

pub fn decompose(
    bundle: &EstimateBundle,
    data: &IVDataset,
    beta_true: &DVector<f64>,
    u_true: &DVector<f64>,
) -> Result<DecompositionDiag> {
    if beta_true.len() != bundle.p() || u_true.len() != data.n() {
        return Err(Error::Validation("truth dimensions do not match the estimate".into()));
    }
    let sqrt_n = (data.n() as f64).sqrt();
    let delta = &bundle.correction * (&bundle.beta_tilde - beta_true) * sqrt_n;
    let noise_term = &bundle.loading * data.z().tr_mul(u_true) / sqrt_n;
    let lhs = (&bundle.beta_hat - beta_true) * sqrt_n;
    let identity_residual = (lhs - &noise_term + &delta).amax();
    Ok(DecompositionDiag {
        delta,
        noise_term,
        identity_residual,
    })
}

fn inverse_min_eigenvalue(gram: &DMatrix<f64>) -> Result<f64> {
    let eig = symmetrize(gram)
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Singular("identification Gram: eigendecomposition failed".into()))?;
    let min = eig.eigenvalues.min();
    // values in [-1e-10, 0] are rounding of a singular Gram and land here too
    if min <= 0.0 {
        return Err(Error::NotIdentified(min));
    }
    Ok(1.0 / min)
}

/// `1/λ_min(M̂ᵀΘ̂_sym M̂)`.
pub fn omega2_hat(theta: &PrecisionEstimate, m: &CrossMomentEstimate) -> Result<f64> {
    let gram = m.m_hat.tr_mul(&(theta.theta_sym() * &m.m_hat));
    inverse_min_eigenvalue(&gram)
}

/// `1/λ_min(MᵀΣ⁻¹M)` from population moments.
pub fn omega2_population(m: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let chol = symmetrize(sigma)
        .cholesky()
        .ok_or_else(|| Error::Singular("population covariance is not positive definite".into()))?;
    let gram = m.tr_mul(&chol.solve(m));
    inverse_min_eigenvalue(&gram)
}

/// Everything produced by one estimation pass.
#[derive(Debug, Clone)]
pub struct Estimation {
    pub theta: PrecisionEstimate,
    pub cross_moment: CrossMomentEstimate,
    pub theta_m: StructuralInverseEstimate,
    pub lasso: LassoFit,
    pub bundle: EstimateBundle,
}

/// Regularized pipeline at fixed penalties.
pub fn estimate(data: &IVDataset, tuning: &TuningConfig) -> Result<Estimation> {
    tuning.validate()?;
    let theta = estimate_precision_nodewise(data.z(), tuning.lambda_node, tuning)?;
    let cross_moment = threshold_cross_moment(data.z(), data.x(), tuning.c0)?;
    let theta_m = estimate_structural_inverse(&theta, &cross_moment, tuning.lambda_node_m, tuning)?;
    let lasso = fit_iv_lasso(data, &theta, &cross_moment, tuning.lambda, tuning)?;
    let bundle = desparsify(data, &lasso.coefficients, &theta, &cross_moment, &theta_m)?;
    Ok(Estimation {
        theta,
        cross_moment,
        theta_m,
        lasso,
        bundle,
    })
}

/// Unregularized low-dimensional pipeline (exact inverses, no thresholding)
/// with the IV Lasso at penalty `lambda`.
pub fn estimate_exact(data: &IVDataset, lambda: f64, tuning: &TuningConfig) -> Result<Estimation> {
    let (theta, cross_moment, theta_m) = exact_inverses(data.z(), data.x())?;
    let lasso = fit_iv_lasso(data, &theta, &cross_moment, lambda, tuning)?;
    let bundle = desparsify(data, &lasso.coefficients, &theta, &cross_moment, &theta_m)?;
    Ok(Estimation {
        theta,
        cross_moment,
        theta_m,
        lasso,
        bundle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Low-dimensional endogenous design with known β⁰ and U.
    fn low_dim(seed: u64, n: usize, p: usize, q: usize) -> (IVDataset, DVector<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, q, |_, _| normal(&mut rng));
        let v = DMatrix::from_fn(n, p, |_, _| normal(&mut rng));
        let e = DVector::from_fn(n, |_, _| normal(&mut rng));
        let x = DMatrix::from_fn(n, p, |i, j| z[(i, j)] + 0.5 * z[(i, (j + 1) % q)] + v[(i, j)]);
        let u = DVector::from_fn(n, |i, _| 0.6 * v[(i, 0)] + 0.8 * e[i]);
        let beta = DVector::from_fn(p, |j, _| 1.0 + j as f64);
        let y = &x * &beta + &u;
        (IVDataset::new(y, x, z).unwrap(), beta, u)
    }

    /// `(M̃ᵀΣ̂⁻¹M̃)⁻¹M̃ᵀΣ̂⁻¹ZᵀY/n` by dense linear algebra.
    fn two_stage_oracle(data: &IVDataset) -> DVector<f64> {
        let n = data.n() as f64;
        let sigma = data.z().tr_mul(data.z()) / n;
        let m = data.z().tr_mul(data.x()) / n;
        let zy = data.z().tr_mul(data.y()) / n;
        let sinv = sigma.try_inverse().unwrap();
        let a = m.transpose() * &sinv * &m;
        a.try_inverse().unwrap() * m.transpose() * sinv * zy
    }

    #[test]
    fn large_penalty_shrinks_to_zero() {
        let (data, _, _) = low_dim(1, 200, 3, 4);
        let (theta, m, _) = exact_inverses(data.z(), data.x()).unwrap();
        let prob = iv_lasso_problem(&data, &theta, &m, 0.0).unwrap();
        let lambda = prob.lambda_max() * 1.01;
        let fit = fit_iv_lasso(&data, &theta, &m, lambda, &TuningConfig::default()).unwrap();
        assert_eq!(fit.coefficients, DVector::zeros(3));
    }

    #[test]
    fn unpenalized_fit_is_the_gmm_formula() {
        let (data, _, _) = low_dim(2, 300, 3, 5);
        let est = estimate_exact(&data, 0.0, &TuningConfig::default()).unwrap();
        let oracle = two_stage_oracle(&data);
        assert!((&est.lasso.coefficients - &oracle).amax() < 1e-8);
        assert!((&est.bundle.beta_hat - &oracle).amax() < 1e-10);
    }

    #[test]
    fn exact_path_ignores_the_initial_estimate() {
        let (data, _, _) = low_dim(3, 300, 2, 4);
        let est = estimate_exact(&data, 0.3, &TuningConfig::default()).unwrap();
        let oracle = two_stage_oracle(&data);
        assert!(est.bundle.correction.amax() < 1e-10);
        assert!((&est.bundle.beta_hat - &oracle).amax() < 1e-10);
        let other = est.bundle.desparsify_at(&DVector::from_vec(vec![10.0, -5.0]));
        assert!((other - &oracle).amax() < 1e-8);
    }

    #[test]
    fn desparsification_is_affine_in_initial_estimate() {
        let (data, _, _) = low_dim(4, 80, 6, 10);
        let tuning = TuningConfig {
            lambda: 0.05,
            lambda_node: 0.1,
            lambda_node_m: 0.05,
            c0: 0.3,
            ..Default::default()
        };
        let est = estimate(&data, &tuning).unwrap();
        let b = &est.bundle;
        let a1 = DVector::from_fn(6, |j, _| j as f64);
        let a2 = DVector::from_fn(6, |j, _| 1.0 - 0.5 * j as f64);
        let diff = b.desparsify_at(&a1) - b.desparsify_at(&a2);
        let expected = -&b.correction * (&a1 - &a2);
        assert!((diff - expected).amax() < 1e-10);
        let again = desparsify(&data, &b.beta_tilde, &est.theta, &est.cross_moment, &est.theta_m).unwrap();
        assert!((&again.beta_hat - (&again.first_term - &again.correction * &again.beta_tilde)).amax() < 1e-12);
    }

    #[test]
    fn decomposition_identity_holds() {
        let (data, beta, u) = low_dim(5, 80, 6, 10);
        let est = estimate(&data, &TuningConfig::default()).unwrap();
        let diag = decompose(&est.bundle, &data, &beta, &u).unwrap();
        assert!(diag.identity_residual < 1e-10, "{}", diag.identity_residual);

        let at_truth = desparsify(&data, &beta, &est.theta, &est.cross_moment, &est.theta_m).unwrap();
        let diag = decompose(&at_truth, &data, &beta, &u).unwrap();
        assert_eq!(diag.delta.amax(), 0.0);
    }

    #[test]
    fn vanishing_correction_gives_first_term() {
        let (data, _, _) = low_dim(6, 300, 2, 2);
        let est = estimate_exact(&data, 0.0, &TuningConfig::default()).unwrap();
        assert!(est.bundle.correction.amax() < 1e-12);
        assert!((&est.bundle.beta_hat - &est.bundle.first_term).amax() < 1e-10);
    }

    #[test]
    fn omega2_examples() {
        let sigma = DMatrix::identity(2, 2);
        let m = DMatrix::from_row_slice(2, 2, &[2f64.sqrt(), 0.0, 0.0, 0.5f64.sqrt()]);
        assert!((omega2_population(&m, &sigma).unwrap() - 2.0).abs() < 1e-12);
        assert!((omega2_population(&DMatrix::identity(2, 2), &sigma).unwrap() - 1.0).abs() < 1e-12);
        let scaled = omega2_population(&(&m * 3.0), &sigma).unwrap();
        assert!((scaled - 2.0 / 9.0).abs() < 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            omega2_population(&singular, &sigma),
            Err(Error::NotIdentified(_))
        ));
    }

    #[test]
    fn omega2_hat_unit_spectrum() {
        let z = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]);
        let (theta, m, _) = exact_inverses(&z, &z).unwrap();
        assert!((omega2_hat(&theta, &m).unwrap() - 1.0).abs() < 1e-12);
    }
}
