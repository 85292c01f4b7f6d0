//! Monte Carlo design with one endogenous regressor and a sparse structural
//! parameter, plus the replication harness.
//!
//! ```text
//! Z ~ N(0, Σ),  Σ_jk = 0.5^|j−k|
//! X₁ = α₁Z₁ + α₋₁ᵀZ₂..q + √(2 − α₁²) V,   X = (X₁, Z₂..p)
//! Y  = Xβ⁰ + U,   (U, V) unit-variance normals with correlation ρ
//! ```

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::estimator::{decompose, desparsify, fit_iv_lasso, omega2_population};
use crate::inference::{
    confidence_interval, default_lambda0, estimate_covariance_homoscedastic, scaled_lasso_sigma, ConfidenceInterval,
};
use crate::matrices::{estimate_precision_nodewise, estimate_structural_inverse, threshold_cross_moment};
use crate::model::{IVDataset, TuningConfig};
use crate::tuning::{tune_all, CVConfig};

/// Name and version of the standard-normal generator, for output metadata.
pub const GENERATOR_ID: &str = "chacha20-stream-per-replication/inverse-cdf-erfc/v1";

/// Number of leading nonzero entries of β₋₁.
pub const ACTIVE_TAIL: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    /// Cross-validate on every replication.
    PerRep,
    /// Cross-validate on replication 0 and reuse the penalties.
    Once,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub rho: f64,
    pub alpha1: f64,
    pub replications: usize,
    pub seed: u64,
    pub level: f64,
    pub tuning_mode: TuningMode,
    /// Penalties used as given, skipping cross-validation.
    pub fixed_tuning: Option<TuningConfig>,
    /// Solver settings and `c0`; penalties are overwritten by tuning.
    pub base_tuning: TuningConfig,
    pub cv: CVConfig,
    /// Scaled-Lasso base penalty; `None` uses `√(2 ln p / n)`.
    pub lambda0: Option<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 100,
            p: 200,
            q: 200,
            rho: 0.5,
            alpha1: 1.0,
            replications: 1000,
            seed: 0,
            level: 0.95,
            tuning_mode: TuningMode::Once,
            fixed_tuning: None,
            base_tuning: TuningConfig::default(),
            cv: CVConfig::default(),
            lambda0: None,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.n < 2 {
            return fail(format!("n must be >= 2, got {}", self.n));
        }
        if self.p < 1 || self.q < 2 {
            return fail(format!("need p >= 1 and q >= 2, got p = {}, q = {}", self.p, self.q));
        }
        if self.p > self.q {
            return Err(Error::UnderIdentified { p: self.p, q: self.q });
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return fail(format!("rho must lie in (-1, 1), got {}", self.rho));
        }
        if !(self.alpha1.abs() <= std::f64::consts::SQRT_2) {
            return fail(format!("|alpha1| must be <= sqrt(2), got {}", self.alpha1));
        }
        if self.replications < 1 {
            return fail("replications must be >= 1".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return fail(format!("level must lie in (0, 1), got {}", self.level));
        }
        if let Some(l) = self.lambda0 {
            if !(l >= 0.0 && l.is_finite()) {
                return fail(format!("lambda0 must be finite and >= 0, got {l}"));
            }
        }
        self.base_tuning.validate()?;
        if let Some(t) = &self.fixed_tuning {
            t.validate()?;
        }
        Ok(())
    }
}

/// Population quantities of the design.
#[derive(Debug, Clone)]
pub struct SimulationTruth {
    pub beta0: DVector<f64>,
    /// Length `q − 1`, entry `j` (1-based) equal to `4 j⁻³`.
    pub alpha_minus1: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Lower Cholesky factor of Σ.
    pub sigma_chol: DMatrix<f64>,
    /// `E[Z Xᵀ]`.
    pub m_pop: DMatrix<f64>,
    pub omega2_pop: f64,
    pub sigma_u_sq: f64,
    pub alpha1: f64,
    pub rho: f64,
}

pub fn toeplitz_covariance(q: usize, base: f64) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |j, k| base.powi((j as i64 - k as i64).unsigned_abs() as i32))
}

/// β⁰ with β₁ = 2, the next 40 entries equispaced from 1 to 3, zeros after.
pub fn structural_beta(p: usize) -> DVector<f64> {
    DVector::from_fn(p, |i, _| match i {
        0 => 2.0,
        i if i <= ACTIVE_TAIL => 1.0 + (i - 1) as f64 * 2.0 / (ACTIVE_TAIL - 1) as f64,
        _ => 0.0,
    })
}

pub fn build_truth(config: &SimulationConfig) -> Result<SimulationTruth> {
    config.validate()?;
    let (p, q) = (config.p, config.q);
    let sigma = toeplitz_covariance(q, 0.5);
    let sigma_chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("instrument covariance is not positive definite".into()))?
        .l();
    let alpha_minus1 = DVector::from_fn(q - 1, |j, _| 4.0 / ((j + 1) as f64).powi(3));
    let mut a = DVector::zeros(q);
    a[0] = config.alpha1;
    a.rows_mut(1, q - 1).copy_from(&alpha_minus1);
    let mut m_pop = DMatrix::zeros(q, p);
    m_pop.set_column(0, &(&sigma * &a));
    for j in 1..p {
        m_pop.set_column(j, &sigma.column(j));
    }
    let omega2_pop = omega2_population(&m_pop, &sigma)?;
    Ok(SimulationTruth {
        beta0: structural_beta(p),
        alpha_minus1,
        sigma,
        sigma_chol,
        m_pop,
        omega2_pop,
        sigma_u_sq: 1.0,
        alpha1: config.alpha1,
        rho: config.rho,
    })
}

/// Generator for replication `index`: the master seed picks the key, the
/// index picks the stream, so draws do not depend on scheduling.
pub fn replication_rng(master_seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Standard normal by inversion of a 53-bit uniform on the open unit interval.
pub fn standard_normal(rng: &mut impl RngCore) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// One dataset of `config.n` rows and its true structural errors.
pub fn sample_dataset(
    truth: &SimulationTruth,
    config: &SimulationConfig,
    rep_index: u64,
) -> Result<(IVDataset, DVector<f64>)> {
    let (n, p, q) = (config.n, truth.beta0.len(), truth.sigma.nrows());
    let mut rng = replication_rng(config.seed, rep_index);
    let mut xi = DMatrix::zeros(n, q);
    let mut u = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let rho_c = (1.0 - truth.rho * truth.rho).sqrt();
    for i in 0..n {
        for j in 0..q {
            xi[(i, j)] = standard_normal(&mut rng);
        }
        let e1 = standard_normal(&mut rng);
        let e2 = standard_normal(&mut rng);
        u[i] = e1;
        v[i] = truth.rho * e1 + rho_c * e2;
    }
    let z = xi * truth.sigma_chol.transpose();
    let v_coef = (2.0 - truth.alpha1 * truth.alpha1).max(0.0).sqrt();
    let x1 = z.column(0) * truth.alpha1 + z.columns(1, q - 1) * &truth.alpha_minus1 + &v * v_coef;
    let mut x = DMatrix::zeros(n, p);
    x.set_column(0, &x1);
    if p > 1 {
        x.columns_mut(1, p - 1).copy_from(&z.columns(1, p - 1));
    }
    let y = &x * &truth.beta0 + &u;
    Ok((IVDataset::new(y, x, z)?, u))
}

/// Quantities kept from one successful replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub index: u64,
    pub beta_tilde_1: f64,
    pub beta_hat_1: f64,
    pub interval: ConfidenceInterval,
    pub covered: bool,
    /// `√n(β̂₁ − β⁰₁)/√Ω̂₁₁`.
    pub standardized: f64,
    pub sigma_hat: f64,
    pub identity_residual: f64,
    pub delta_sup: f64,
    pub noise_sup: f64,
    pub omega2_hat: Option<f64>,
}

fn resolve_tuning(config: &SimulationConfig, data: &IVDataset, shared: Option<&TuningConfig>) -> Result<TuningConfig> {
    if let Some(t) = &config.fixed_tuning {
        return Ok(*t);
    }
    if let Some(t) = shared {
        return Ok(*t);
    }
    Ok(tune_all(data, &config.cv, &config.base_tuning)?.tuning)
}

/// Samples, tunes if needed, estimates and builds the interval for β₁.
pub fn run_replication(
    truth: &SimulationTruth,
    config: &SimulationConfig,
    rep_index: u64,
    shared_tuning: Option<&TuningConfig>,
) -> Result<ReplicationRecord> {
    let (data, u) = sample_dataset(truth, config, rep_index)?;
    let tuning = resolve_tuning(config, &data, shared_tuning)?;
    let theta = estimate_precision_nodewise(data.z(), tuning.lambda_node, &tuning)?;
    let m = threshold_cross_moment(data.z(), data.x(), tuning.c0)?;
    let theta_m = estimate_structural_inverse(&theta, &m, tuning.lambda_node_m, &tuning)?;
    let lasso = fit_iv_lasso(&data, &theta, &m, tuning.lambda, &tuning)?;
    let bundle = desparsify(&data, &lasso.coefficients, &theta, &m, &theta_m)?;

    let lambda0 = config.lambda0.unwrap_or_else(|| default_lambda0(data.p(), data.n()));
    let scaled = scaled_lasso_sigma(&data, &theta, &m, lambda0, &tuning)?;
    let cov = estimate_covariance_homoscedastic(&theta_m, scaled.sigma_hat * scaled.sigma_hat)?;
    let mut a = DVector::zeros(data.p());
    a[0] = 1.0;
    let interval = confidence_interval(&bundle, &cov, &a, config.level)?;
    let var = cov.omega_hat[(0, 0)];
    if !(var > 0.0) {
        return Err(Error::NegativeVariance(var));
    }
    let b1 = truth.beta0[0];
    let standardized = (data.n() as f64).sqrt() * (bundle.beta_hat[0] - b1) / var.sqrt();
    let diag = decompose(&bundle, &data, &truth.beta0, &u)?;
    Ok(ReplicationRecord {
        index: rep_index,
        beta_tilde_1: bundle.beta_tilde[0],
        beta_hat_1: bundle.beta_hat[0],
        covered: interval.contains(b1),
        interval,
        standardized,
        sigma_hat: scaled.sigma_hat,
        identity_residual: diag.identity_residual,
        delta_sup: diag.delta.amax(),
        noise_sup: diag.noise_term.amax(),
        omega2_hat: crate::estimator::omega2_hat(&theta, &m).ok(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub abs_mean_bias_desparsified: f64,
    pub abs_mean_bias_lasso: f64,
    pub coverage: f64,
    pub mean_ci_width: f64,
    /// Ascending.
    pub standardized_stats: Vec<f64>,
    pub replication_failures: usize,
    pub successes: usize,
}

#[derive(Debug, Clone)]
pub struct MonteCarloRun {
    pub summary: MonteCarloSummary,
    pub records: Vec<ReplicationRecord>,
    /// `(index, message)` of every failed replication.
    pub failures: Vec<(u64, String)>,
    /// Penalties shared by all replications, if any.
    pub shared_tuning: Option<TuningConfig>,
}

/// Aggregates successful records in index order.
pub fn summarize(records: &[ReplicationRecord], failures: usize, beta1: f64) -> Result<MonteCarloSummary> {
    if records.is_empty() {
        return Err(Error::AllReplicationsFailed(failures));
    }
    let k = records.len() as f64;
    let mean = |f: &dyn Fn(&ReplicationRecord) -> f64| records.iter().map(f).sum::<f64>() / k;
    let mut standardized_stats: Vec<f64> = records.iter().map(|r| r.standardized).collect();
    standardized_stats.sort_by(f64::total_cmp);
    Ok(MonteCarloSummary {
        abs_mean_bias_desparsified: mean(&|r| r.beta_hat_1 - beta1).abs(),
        abs_mean_bias_lasso: mean(&|r| r.beta_tilde_1 - beta1).abs(),
        coverage: records.iter().filter(|r| r.covered).count() as f64 / k,
        mean_ci_width: mean(&|r| r.interval.width()),
        standardized_stats,
        replication_failures: failures,
        successes: records.len(),
    })
}

/// Runs all replications on the current rayon pool.
///
/// In [`TuningMode::Once`] the penalties come from cross-validation on the
/// data of replication 0; a failure there aborts the run.
pub fn run_monte_carlo(truth: &SimulationTruth, config: &SimulationConfig) -> Result<MonteCarloRun> {
    config.validate()?;
    let shared_tuning = match (&config.fixed_tuning, config.tuning_mode) {
        (Some(t), _) => Some(*t),
        (None, TuningMode::Once) => {
            let (data, _) = sample_dataset(truth, config, 0)?;
            Some(tune_all(&data, &config.cv, &config.base_tuning)?.tuning)
        }
        (None, TuningMode::PerRep) => None,
    };
    let outcomes: Vec<Result<ReplicationRecord>> = (0..config.replications as u64)
        .into_par_iter()
        .map(|i| run_replication(truth, config, i, shared_tuning.as_ref()))
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => records.push(r),
            Err(e) => failures.push((i as u64, e.to_string())),
        }
    }
    let summary = summarize(&records, failures.len(), truth.beta0[0])?;
    Ok(MonteCarloRun {
        summary,
        records,
        failures,
        shared_tuning,
    })
}
