//! Covariance estimation, confidence intervals and Wald tests for `aᵀβ⁰`.
//!
//! Intervals and tests use the limit `√n aᵀ(β̂ − β⁰) ⇒ N(0, aᵀΩa)`, so
//! every covariance estimate here targets `Ω` itself (not `Ω/n`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::estimator::{fit_iv_lasso_warm, EstimateBundle};
use crate::matrices::{symmetrize, CrossMomentEstimate, PrecisionEstimate, StructuralInverseEstimate};
use crate::model::{IVDataset, TuningConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    HeteroscedasticSandwich,
    HomoscedasticScaledLasso,
}

#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub omega_hat: DMatrix<f64>,
    pub mode: CovarianceMode,
    pub sigma_hat_sq: Option<f64>,
}

impl CovarianceEstimate {
    /// `aᵀΩ̂a`.
    pub fn variance_along(&self, a: &DVector<f64>) -> f64 {
        a.dot(&(&self.omega_hat * a))
    }
}

/// `Ω̂ = WWᵀ/n` with `W = Θ̂ᴹM̂ᵀΘ̂ Zᵀ diag(Û)`.
pub fn estimate_covariance_sandwich(bundle: &EstimateBundle, z: &DMatrix<f64>) -> Result<CovarianceEstimate> {
    if z.nrows() != bundle.residuals_hat.len() || z.ncols() != bundle.loading.ncols() {
        return Err(Error::Validation(format!(
            "Z is {}x{} but the estimate has n = {}, q = {}",
            z.nrows(),
            z.ncols(),
            bundle.residuals_hat.len(),
            bundle.loading.ncols()
        )));
    }
    let mut weighted = z.clone();
    for (mut row, u) in weighted.row_iter_mut().zip(bundle.residuals_hat.iter()) {
        row *= *u;
    }
    let w = &bundle.loading * weighted.transpose();
    let omega = &w * w.transpose() / z.nrows() as f64;
    Ok(CovarianceEstimate {
        omega_hat: symmetrize(&omega),
        mode: CovarianceMode::HeteroscedasticSandwich,
        sigma_hat_sq: None,
    })
}

/// `Ω̂ = σ̂²(Θ̂ᴹ + Θ̂ᴹᵀ)/2`.
pub fn estimate_covariance_homoscedastic(
    theta_m: &StructuralInverseEstimate,
    sigma_hat_sq: f64,
) -> Result<CovarianceEstimate> {
    if !(sigma_hat_sq >= 0.0) {
        return Err(Error::Validation(format!("sigma^2 must be >= 0, got {sigma_hat_sq}")));
    }
    Ok(CovarianceEstimate {
        omega_hat: symmetrize(&theta_m.theta_m_hat) * sigma_hat_sq,
        mode: CovarianceMode::HomoscedasticScaledLasso,
        sigma_hat_sq: Some(sigma_hat_sq),
    })
}

/// Result of the alternating noise-level iteration.
#[derive(Debug, Clone)]
pub struct ScaledLassoFit {
    pub sigma_hat: f64,
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub const SCALED_LASSO_TOL: f64 = 1e-6;
pub const SCALED_LASSO_MAX_ITER: usize = 100;
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Default base penalty `√(2 ln p / n)`.
pub fn default_lambda0(p: usize, n: usize) -> f64 {
    (2.0 * (p.max(2) as f64).ln() / n as f64).sqrt()
}

/// Joint estimate of β and the noise level: alternate between the IV Lasso
/// at penalty `λ0·σ̂` and `σ̂² = ‖Y − Xβ‖²/n`, starting from `σ̂² = ‖Y‖²/n`.
pub fn scaled_lasso_sigma(
    data: &IVDataset,
    theta: &PrecisionEstimate,
    m: &CrossMomentEstimate,
    lambda0: f64,
    config: &TuningConfig,
) -> Result<ScaledLassoFit> {
    if !(lambda0 >= 0.0) {
        return Err(Error::Validation(format!("lambda0 must be >= 0, got {lambda0}")));
    }
    let n = data.n() as f64;
    let mut sigma = (data.y().norm_squared() / n).sqrt();
    if sigma < SIGMA_FLOOR {
        return Err(Error::DegenerateNoise(sigma));
    }
    let mut beta: Option<DVector<f64>> = None;
    for it in 1..=SCALED_LASSO_MAX_ITER {
        let fit = fit_iv_lasso_warm(data, theta, m, lambda0 * sigma, beta.as_ref(), config)?;
        let next = ((data.y() - data.x() * &fit.coefficients).norm_squared() / n).sqrt();
        if next < SIGMA_FLOOR {
            return Err(Error::DegenerateNoise(next));
        }
        let step = (next - sigma).abs();
        sigma = next;
        beta = Some(fit.coefficients);
        if step < SCALED_LASSO_TOL {
            return Ok(ScaledLassoFit {
                sigma_hat: sigma,
                beta: beta.unwrap(),
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(ScaledLassoFit {
        sigma_hat: sigma,
        beta: beta.unwrap(),
        iterations: SCALED_LASSO_MAX_ITER,
        converged: false,
    })
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function on `(0, 1)`.
pub fn normal_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Validation(format!("quantile level must lie in (0, 1), got {u}")));
    }
    Ok(-std::f64::consts::SQRT_2 * erfc_inv(2.0 * u))
}

/// Two-sided tail probability `2(1 − Φ(|s|))`.
pub fn two_sided_p_value(statistic: f64) -> f64 {
    erfc(statistic.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// `‖a‖₁/‖a‖₂`, the sparsity measure of a target functional.
pub fn functional_l1_l2_ratio(a: &DVector<f64>) -> f64 {
    let l2 = a.norm();
    if l2 == 0.0 {
        0.0
    } else {
        a.lp_norm(1) / l2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub target: Vec<f64>,
    pub level: f64,
    pub center: f64,
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

fn check_target(bundle: &EstimateBundle, cov: &CovarianceEstimate, a: &DVector<f64>) -> Result<f64> {
    if a.len() != bundle.p() || cov.omega_hat.nrows() != bundle.p() {
        return Err(Error::Validation(format!(
            "target has length {}, expected p = {}",
            a.len(),
            bundle.p()
        )));
    }
    let var = cov.variance_along(a);
    if var < -1e-10 || !var.is_finite() {
        return Err(Error::NegativeVariance(var));
    }
    Ok(var.max(0.0))
}

/// `aᵀβ̂ ± Φ⁻¹(1 − α/2)·√(aᵀΩ̂a/n)` with `α = 1 − level`.
pub fn confidence_interval(
    bundle: &EstimateBundle,
    cov: &CovarianceEstimate,
    a: &DVector<f64>,
    level: f64,
) -> Result<ConfidenceInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("level must lie in (0, 1), got {level}")));
    }
    let var = check_target(bundle, cov, a)?;
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0)?;
    let center = a.dot(&bundle.beta_hat);
    let half_width = z * (var / bundle.n as f64).sqrt();
    Ok(ConfidenceInterval {
        target: a.iter().copied().collect(),
        level,
        center,
        half_width,
        lower: center - half_width,
        upper: center + half_width,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub rejected: bool,
}

/// Wald test of `aᵀβ⁰ = aᵀβ^H` at level `alpha`.
pub fn wald_test(
    bundle: &EstimateBundle,
    cov: &CovarianceEstimate,
    a: &DVector<f64>,
    beta_h: &DVector<f64>,
    alpha: f64,
) -> Result<TestResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if beta_h.len() != bundle.p() {
        return Err(Error::Validation("null vector length mismatch".into()));
    }
    let var = check_target(bundle, cov, a)?;
    if var <= 0.0 {
        return Err(Error::Validation("zero variance along the target".into()));
    }
    let statistic = (bundle.n as f64).sqrt() * a.dot(&(&bundle.beta_hat - beta_h)).abs() / var.sqrt();
    let critical = normal_quantile(1.0 - alpha / 2.0)?;
    Ok(TestResult {
        statistic,
        p_value: two_sided_p_value(statistic),
        rejected: statistic >= critical,
    })
}
