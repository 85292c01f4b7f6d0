//! `hdiv estimate`: fit on user data and report intervals.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use hdiv_core::estimator::{desparsify, fit_iv_lasso, omega2_hat};
use hdiv_core::inference::{
    confidence_interval, default_lambda0, estimate_covariance_homoscedastic, estimate_covariance_sandwich,
    scaled_lasso_sigma, wald_test,
};
use hdiv_core::matrices::{
    estimate_precision_nodewise, estimate_structural_inverse, threshold_cross_moment, RowCertificate,
};
use hdiv_core::tuning::{cv_iv_lasso_lambda, cv_nodewise_lambda, CVConfig, CVResult, GramScale};
use hdiv_core::{IVDataset, TuningConfig};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{fmt_float, load_dataset_csv, write_csv, write_json};
use crate::manifest::{config_digest, timestamp, RunManifest, TOOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CovChoice {
    Sandwich,
    Homoscedastic,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EstimateArgs {
    /// Response, one column.
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// Regressors, n × p.
    #[arg(long)]
    pub x: Option<PathBuf>,
    /// Instruments, n × q with q ≥ p.
    #[arg(long)]
    pub z: Option<PathBuf>,
    /// Input files start with a header row.
    #[arg(long)]
    pub header: bool,
    /// Subtract column means from Y, X and Z before fitting.
    #[arg(long)]
    pub center: bool,
    /// IV Lasso penalty.
    #[arg(long, conflicts_with = "cv")]
    pub lambda: Option<f64>,
    /// Choose the IV Lasso penalty by cross-validation.
    #[arg(long)]
    pub cv: bool,
    /// Nodewise penalty for the instrument precision matrix.
    #[arg(long, conflicts_with = "cv_node")]
    pub lambda_node: Option<f64>,
    /// Nodewise penalty for the structural inverse.
    #[arg(long, conflicts_with = "cv_node")]
    pub lambda_node_m: Option<f64>,
    /// Choose both nodewise penalties by cross-validation.
    #[arg(long)]
    pub cv_node: bool,
    /// Threshold constant for the cross-moment matrix.
    #[arg(long)]
    pub c0: Option<f64>,
    /// 1-based coefficient indices ("1,3") or a CSV file of coefficient vectors.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long, value_enum)]
    pub cov: Option<CovChoice>,
    /// Base penalty of the scaled Lasso for `--cov homoscedastic`.
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Fold-assignment seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with any of the settings above; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Settings accepted from `--config`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateFile {
    pub y: Option<PathBuf>,
    pub x: Option<PathBuf>,
    pub z: Option<PathBuf>,
    pub header: Option<bool>,
    pub center: Option<bool>,
    pub lambda: Option<f64>,
    pub cv: Option<bool>,
    pub lambda_node: Option<f64>,
    pub lambda_node_m: Option<f64>,
    pub cv_node: Option<bool>,
    pub c0: Option<f64>,
    pub target: Option<String>,
    pub level: Option<f64>,
    pub cov: Option<CovChoice>,
    pub lambda0: Option<f64>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub max_sweeps: Option<usize>,
    pub tol: Option<f64>,
    pub out: Option<PathBuf>,
}

/// A penalty either given or chosen by cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    Fixed(f64),
    CrossValidated,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateConfig {
    pub y: PathBuf,
    pub x: PathBuf,
    pub z: PathBuf,
    pub header: bool,
    pub center: bool,
    pub lambda: Penalty,
    pub lambda_node: Penalty,
    pub lambda_node_m: Penalty,
    pub c0: f64,
    pub target: String,
    pub level: f64,
    pub cov: CovChoice,
    pub lambda0: Option<f64>,
    pub folds: usize,
    pub seed: u64,
    pub max_sweeps: usize,
    pub tol: f64,
    pub out: PathBuf,
}

pub(crate) fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        }
    }
}

fn penalty(flag: Option<f64>, flag_cv: bool, file: Option<f64>, file_cv: Option<bool>, default: f64) -> Penalty {
    if let Some(v) = flag {
        return Penalty::Fixed(v);
    }
    if flag_cv {
        return Penalty::CrossValidated;
    }
    if let Some(v) = file {
        return Penalty::Fixed(v);
    }
    if file_cv == Some(true) {
        return Penalty::CrossValidated;
    }
    Penalty::Fixed(default)
}

impl EstimateConfig {
    /// Flags over config file over defaults.
    pub fn resolve(args: &EstimateArgs) -> Result<Self> {
        let file: EstimateFile = read_config(args.config.as_deref())?;
        let defaults = TuningConfig::default();
        let cv_defaults = CVConfig::default();
        let need = |flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str| {
            flag.clone()
                .or_else(|| file.clone())
                .ok_or_else(|| CliError::Usage(format!("the argument '--{name} <PATH>' is required")))
        };
        let node_flag_cv = args.cv_node;
        let node_file_cv = file.cv_node;
        Ok(Self {
            y: need(&args.y, &file.y, "y")?,
            x: need(&args.x, &file.x, "x")?,
            z: need(&args.z, &file.z, "z")?,
            header: args.header || file.header.unwrap_or(false),
            center: args.center || file.center.unwrap_or(false),
            lambda: penalty(args.lambda, args.cv, file.lambda, file.cv, defaults.lambda),
            lambda_node: penalty(
                args.lambda_node,
                node_flag_cv,
                file.lambda_node,
                node_file_cv,
                defaults.lambda_node,
            ),
            lambda_node_m: penalty(
                args.lambda_node_m,
                node_flag_cv,
                file.lambda_node_m,
                node_file_cv,
                defaults.lambda_node_m,
            ),
            c0: args.c0.or(file.c0).unwrap_or(defaults.c0),
            target: args.target.clone().or(file.target).unwrap_or_else(|| "all".into()),
            level: args.level.or(file.level).unwrap_or(0.95),
            cov: args.cov.or(file.cov).unwrap_or(CovChoice::Sandwich),
            lambda0: args.lambda0.or(file.lambda0),
            folds: args.folds.or(file.folds).unwrap_or(cv_defaults.folds),
            seed: args.seed.or(file.seed).unwrap_or(cv_defaults.seed),
            max_sweeps: args.max_sweeps.or(file.max_sweeps).unwrap_or(defaults.max_sweeps),
            tol: args.tol.or(file.tol).unwrap_or(defaults.tol),
            out: args
                .out
                .clone()
                .or(file.out)
                .unwrap_or_else(|| PathBuf::from("hdiv-out")),
        })
    }
}

/// Coefficient vectors `a` with display ids.
pub fn parse_targets(spec: &str, p: usize) -> Result<Vec<(String, DVector<f64>)>> {
    let unit = |j: usize| {
        let mut a = DVector::zeros(p);
        a[j - 1] = 1.0;
        (format!("beta_{j}"), a)
    };
    if spec == "all" {
        return Ok((1..=p).map(unit).collect());
    }
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if let Ok(idx) = parts
        .iter()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
    {
        return idx
            .into_iter()
            .map(|j| {
                if j == 0 || j > p {
                    Err(CliError::Input(format!("target index {j} outside 1..={p}")))
                } else {
                    Ok(unit(j))
                }
            })
            .collect();
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(CliError::Input(format!(
            "--target {spec:?} is neither a list of indices nor a readable file"
        )));
    }
    let m = crate::io::read_matrix_csv(path, false)?;
    if m.ncols() != p {
        return Err(CliError::Input(format!(
            "{}: target vectors have {} entries, expected p = {p}",
            path.display(),
            m.ncols()
        )));
    }
    Ok(m.row_iter()
        .enumerate()
        .map(|(i, r)| (format!("a{}", i + 1), r.transpose()))
        .collect())
}

#[derive(Debug, Serialize)]
struct CertificateRow {
    row: usize,
    observed: f64,
    bound: f64,
}

fn certificates(c: &[RowCertificate]) -> Vec<CertificateRow> {
    c.iter()
        .enumerate()
        .map(|(row, c)| CertificateRow {
            row: row + 1,
            observed: c.observed,
            bound: c.bound,
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct Penalties {
    lambda: f64,
    lambda_node: f64,
    lambda_node_m: f64,
    c0: f64,
    threshold: f64,
}

#[derive(Debug, Serialize)]
struct CvCurve {
    chosen_lambda: f64,
    grid: Vec<f64>,
    cv_curve: Vec<f64>,
}

impl From<&CVResult> for CvCurve {
    fn from(r: &CVResult) -> Self {
        Self {
            chosen_lambda: r.chosen_lambda,
            grid: r.grid.clone(),
            cv_curve: r.cv_curve.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
struct EstimatesJson {
    manifest_digest: String,
    n: usize,
    p: usize,
    q: usize,
    beta_tilde: Vec<f64>,
    beta_hat: Vec<f64>,
    penalties: Penalties,
    cross_validation: Vec<(String, CvCurve)>,
    kept_cross_moments: usize,
    omega2_hat: Option<f64>,
    covariance: CovChoice,
    sigma_hat: Option<f64>,
    lasso_kkt_residual: f64,
    lasso_sweeps: usize,
    precision_floored_eigenvalues: usize,
    precision_certificates: Vec<CertificateRow>,
    structural_certificates: Vec<CertificateRow>,
}

pub const ESTIMATE_DEVIATIONS: &[&str] = &[
    "IV Lasso quadratic form uses the PSD projection of the symmetrized instrument precision estimate",
    "structural-inverse certificates are checked against the Gram of the PSD square-root design",
];

pub fn run_estimate(args: &EstimateArgs) -> Result<()> {
    let started_at = timestamp();
    let cfg = EstimateConfig::resolve(args)?;
    let mut data: IVDataset = load_dataset_csv(&cfg.y, &cfg.x, &cfg.z, cfg.header)?;
    if cfg.center {
        data = data.centered();
    }
    let targets = parse_targets(&cfg.target, data.p())?;
    let mut tuning = TuningConfig {
        c0: cfg.c0,
        max_sweeps: cfg.max_sweeps,
        tol: cfg.tol,
        ..TuningConfig::default()
    };
    let cv = CVConfig {
        folds: cfg.folds,
        seed: cfg.seed,
        ..CVConfig::default()
    };
    let mut curves = Vec::new();

    if let Penalty::Fixed(v) = cfg.lambda_node {
        tuning.lambda_node = v;
    } else {
        let r = cv_nodewise_lambda(data.z(), &cv, GramScale::Mean, &tuning)?;
        tuning.lambda_node = r.chosen_lambda;
        curves.push(("lambda_node".to_string(), CvCurve::from(&r)));
    }
    if let Penalty::Fixed(v) = cfg.lambda {
        tuning.lambda = v;
    }
    if let Penalty::Fixed(v) = cfg.lambda_node_m {
        tuning.lambda_node_m = v;
    }
    tuning.validate()?;

    let theta = estimate_precision_nodewise(data.z(), tuning.lambda_node, &tuning)?;
    let m = threshold_cross_moment(data.z(), data.x(), tuning.c0)?;
    if cfg.lambda_node_m == Penalty::CrossValidated {
        let b = &theta.theta_sqrt * &m.m_hat;
        let r = cv_nodewise_lambda(&b, &cv, GramScale::Sum, &tuning)?;
        tuning.lambda_node_m = r.chosen_lambda;
        curves.push(("lambda_node_m".to_string(), CvCurve::from(&r)));
    }
    if cfg.lambda == Penalty::CrossValidated {
        let r = cv_iv_lasso_lambda(&data, &cv, &tuning)?;
        tuning.lambda = r.chosen_lambda;
        curves.push(("lambda".to_string(), CvCurve::from(&r)));
    }
    let theta_m = estimate_structural_inverse(&theta, &m, tuning.lambda_node_m, &tuning)?;
    let lasso = fit_iv_lasso(&data, &theta, &m, tuning.lambda, &tuning)?;
    let bundle = desparsify(&data, &lasso.coefficients, &theta, &m, &theta_m)?;

    let (cov, sigma_hat) = match cfg.cov {
        CovChoice::Sandwich => (estimate_covariance_sandwich(&bundle, data.z())?, None),
        CovChoice::Homoscedastic => {
            let l0 = cfg.lambda0.unwrap_or_else(|| default_lambda0(data.p(), data.n()));
            let s = scaled_lasso_sigma(&data, &theta, &m, l0, &tuning)?;
            (
                estimate_covariance_homoscedastic(&theta_m, s.sigma_hat * s.sigma_hat)?,
                Some(s.sigma_hat),
            )
        }
    };

    let zero = DVector::zeros(data.p());
    let mut rows = Vec::with_capacity(targets.len());
    for (id, a) in &targets {
        let ci = confidence_interval(&bundle, &cov, a, cfg.level)?;
        let test = wald_test(&bundle, &cov, a, &zero, 1.0 - cfg.level)?;
        rows.push(vec![
            id.clone(),
            fmt_float(ci.center),
            fmt_float(ci.lower),
            fmt_float(ci.upper),
            fmt_float(ci.width()),
            fmt_float(test.statistic),
            fmt_float(test.p_value),
        ]);
    }

    let config_json = serde_json::to_value(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    let digest = config_digest(&config_json);
    let estimates = EstimatesJson {
        manifest_digest: digest.clone(),
        n: data.n(),
        p: data.p(),
        q: data.q(),
        beta_tilde: bundle.beta_tilde.iter().copied().collect(),
        beta_hat: bundle.beta_hat.iter().copied().collect(),
        penalties: Penalties {
            lambda: tuning.lambda,
            lambda_node: tuning.lambda_node,
            lambda_node_m: tuning.lambda_node_m,
            c0: tuning.c0,
            threshold: m.threshold,
        },
        cross_validation: curves,
        kept_cross_moments: m.kept_count,
        omega2_hat: omega2_hat(&theta, &m).ok(),
        covariance: cfg.cov,
        sigma_hat,
        lasso_kkt_residual: lasso.kkt_residual,
        lasso_sweeps: lasso.sweeps_used,
        precision_floored_eigenvalues: theta.floored_eigenvalues,
        precision_certificates: certificates(&theta.certificates),
        structural_certificates: certificates(&theta_m.certificates),
    };

    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    write_json(&cfg.out.join("estimates.json"), &estimates)?;
    write_csv(
        &cfg.out.join("intervals.csv"),
        &["a_id", "center", "lower", "upper", "width", "statistic", "p_value"],
        &rows,
    )?;
    let manifest = RunManifest {
        command: "estimate".into(),
        config: config_json,
        config_digest: digest,
        seed: cfg.seed,
        tool_version: TOOL_VERSION.into(),
        generator: None,
        started_at,
        finished_at: timestamp(),
        deviations: ESTIMATE_DEVIATIONS.iter().map(|s| s.to_string()).collect(),
        outputs: vec!["estimates.json".into(), "intervals.csv".into()],
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_from_indices() {
        let t = parse_targets("1, 3", 4).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].0, "beta_3");
        assert_eq!(t[1].1[2], 1.0);
        assert!(parse_targets("5", 4).is_err());
        assert!(parse_targets("0", 4).is_err());
        assert_eq!(parse_targets("all", 3).unwrap().len(), 3);
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        assert_eq!(
            penalty(Some(0.2), false, Some(0.3), Some(true), 0.1),
            Penalty::Fixed(0.2)
        );
        assert_eq!(penalty(None, true, Some(0.3), None, 0.1), Penalty::CrossValidated);
        assert_eq!(penalty(None, false, Some(0.3), Some(true), 0.1), Penalty::Fixed(0.3));
        assert_eq!(penalty(None, false, None, Some(true), 0.1), Penalty::CrossValidated);
        assert_eq!(penalty(None, false, None, None, 0.1), Penalty::Fixed(0.1));
    }
}
