//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) and exits non-zero when any
//! line fails. The two 200-replication Monte Carlo cells dominate the
//! runtime.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use hdiv_core::estimator::estimate_exact;
use hdiv_core::lasso::{solve_quadratic_lasso, QuadraticLassoProblem};
use hdiv_core::matrices::{estimate_precision_nodewise, estimate_structural_inverse, threshold_cross_moment};
use hdiv_core::simulation::{
    build_truth, run_monte_carlo, sample_dataset, MonteCarloRun, SimulationConfig, TuningMode,
};
use hdiv_core::{IVDataset, TuningConfig};
use hdiv_validation::{interquartile_range, ks_distance_normal, matrix_one_norm, median, Report};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_SLS_TOL: f64 = 1e-10;
const TWO_SLS_SECONDS: f64 = 5.0;
const CERT_TOL: f64 = 1e-8;
const CERT_SECONDS: f64 = 60.0;
const GRID_COEF_TOL: f64 = 1e-3;
const GRID_OBJ_TOL: f64 = 1e-6;
const GRID_SECONDS: f64 = 30.0;
const IDENTITY_TOL: f64 = 1e-10;
const MIN_IDENTITY_REPS: usize = 100;
const MC_REPS: usize = 200;
const BIAS_DESPARSIFIED: (f64, f64) = (0.631, 0.25);
const BIAS_LASSO: (f64, f64) = (1.574, 0.35);
const COVERAGE_RANGE: (f64, f64) = (0.90, 0.99);
const COVERAGE_STRONG: (f64, f64) = (0.953, 0.03);
const COVERAGE_WEAK: (f64, f64) = (0.978, 0.03);
const RATE_FACTOR: f64 = 2.0;
const RATE_DRAWS: u64 = 20;
const NORMAL_IQR: f64 = 1.349;
const IQR_REL_TOL: f64 = 0.25;
const KS_MAX: f64 = 0.12;
const DELTA_SHARE: f64 = 0.80;
const SIZE_RANGE: (f64, f64) = (0.02, 0.09);

fn within(v: f64, (target, tol): (f64, f64)) -> bool {
    (v - target).abs() <= tol
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn low_dim_sample(seed: u64, n: usize, p: usize, q: usize) -> IVDataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, q, |_, _| normal(&mut r));
    let v = DVector::from_fn(n, |_, _| normal(&mut r));
    let pi = DMatrix::from_fn(q, p, |j, k| if j % p == k { 1.0 } else { 0.3 * normal(&mut r) });
    let x = &z * pi + &v * DVector::from_element(p, 0.7).transpose();
    let beta = DVector::from_fn(p, |j, _| 1.0 - 0.5 * j as f64);
    let u = &v * 0.6 + DVector::from_fn(n, |_, _| 0.8 * normal(&mut r));
    let y = &x * beta + u;
    IVDataset::new(y, x, z).unwrap()
}

/// `(XᵀP_Z X)⁻¹XᵀP_Z Y` through a QR of Z.
fn two_stage(data: &IVDataset) -> DVector<f64> {
    let qz = data.z().clone().qr().q();
    let px = &qz * qz.tr_mul(data.x());
    let lhs: DMatrix<f64> = px.tr_mul(data.x());
    lhs.lu().solve(&px.tr_mul(data.y())).unwrap()
}

fn two_stage_equivalence(report: &mut Report) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let data = low_dim_sample(1000 + seed, 500, 3, 4);
        let oracle = two_stage(&data);
        for lambda in [0.0, 0.2] {
            let est = estimate_exact(&data, lambda, &TuningConfig::default()).unwrap();
            worst = worst.max((&est.bundle.beta_hat - &oracle).amax());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report.check(
        "1 2SLS equivalence",
        worst <= TWO_SLS_TOL && secs < TWO_SLS_SECONDS,
        format!("max |diff| {worst:.2e} (tol {TWO_SLS_TOL:e}), {secs:.2} s (limit {TWO_SLS_SECONDS} s)"),
    );
}

/// `max_j (‖GΘⱼ − eⱼ‖∞ − λ/τⱼ²)` recomputed from scratch.
fn worst_certificate_slack(gram: &DMatrix<f64>, theta: &DMatrix<f64>, tau_sq: &DVector<f64>, lambda: f64) -> f64 {
    (0..theta.nrows())
        .map(|j| {
            let mut r = gram * theta.row(j).transpose();
            r[j] -= 1.0;
            r.amax() - lambda / tau_sq[j]
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn certificates(report: &mut Report) {
    let start = Instant::now();
    let mut worst_theta = f64::NEG_INFINITY;
    let mut worst_theta_m = f64::NEG_INFINITY;
    let mut reported_ok = true;
    let tuning = TuningConfig::default();
    for seed in 0..10u64 {
        let config = SimulationConfig {
            n: 100,
            p: 50,
            q: 50,
            seed: 500 + seed,
            replications: 1,
            ..SimulationConfig::default()
        };
        let truth = build_truth(&config).unwrap();
        let (data, _) = sample_dataset(&truth, &config, 0).unwrap();
        let sigma_hat = data.z().tr_mul(data.z()) / data.n() as f64;
        let m = threshold_cross_moment(data.z(), data.x(), tuning.c0).unwrap();
        for lambda in [0.01, 0.05, 0.2] {
            let theta = estimate_precision_nodewise(data.z(), lambda, &tuning).unwrap();
            worst_theta = worst_theta.max(worst_certificate_slack(
                &sigma_hat,
                &theta.theta_hat,
                &theta.tau_sq,
                lambda,
            ));
            let theta_m = estimate_structural_inverse(&theta, &m, lambda, &tuning).unwrap();
            let b = &theta.theta_sqrt * &m.m_hat;
            let gram = b.tr_mul(&b);
            worst_theta_m = worst_theta_m.max(worst_certificate_slack(
                &gram,
                &theta_m.theta_m_hat,
                &theta_m.tau_tilde_sq,
                lambda,
            ));
            reported_ok &= theta.certificates.iter().all(|c| c.holds(CERT_TOL));
            reported_ok &= theta_m.certificates.iter().all(|c| c.holds(CERT_TOL));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report.check(
        "2 KKT certificates",
        worst_theta <= CERT_TOL && worst_theta_m <= CERT_TOL && reported_ok && secs < CERT_SECONDS,
        format!(
            "worst excess over bound: precision {worst_theta:.2e}, structural {worst_theta_m:.2e} (tol {CERT_TOL:e}); \
             {secs:.1} s (limit {CERT_SECONDS} s)"
        ),
    );
}

fn grid_minimum(prob: &QuadraticLassoProblem, center: [f64; 2], half: f64, h: f64) -> (DVector<f64>, f64) {
    let k = (half / h).round() as i64;
    let mut best = (DVector::zeros(2), f64::INFINITY);
    for i in -k..=k {
        for j in -k..=k {
            let b = DVector::from_vec(vec![center[0] + i as f64 * h, center[1] + j as f64 * h]);
            let f = prob.objective(&b);
            if f < best.1 {
                best = (b, f);
            }
        }
    }
    best
}

fn lasso_grid_oracle(report: &mut Report) {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let (mut worst_coef, mut worst_obj) = (0.0f64, 0.0f64);
    let mut beats_grid = true;
    for _ in 0..50 {
        let a = DMatrix::from_fn(5, 2, |_, _| normal(&mut r));
        let q = a.tr_mul(&a) / 5.0 + DMatrix::identity(2, 2) * 0.1;
        let c = DVector::from_fn(2, |_, _| normal(&mut r));
        let lambda = 0.02 + 0.6 * normal(&mut r).abs();
        let prob = QuadraticLassoProblem::new(q, c, lambda).unwrap();
        let fit = solve_quadratic_lasso(&prob, None, &TuningConfig::default()).unwrap();
        let (coarse, _) = grid_minimum(&prob, [0.0, 0.0], 8.0, 1e-2);
        let (fine, f_fine) = grid_minimum(&prob, [coarse[0], coarse[1]], 2e-2, 1e-4);
        worst_coef = worst_coef.max((&fit.coefficients - &fine).amax());
        worst_obj = worst_obj.max((fit.objective - f_fine).abs());
        beats_grid &= fit.objective <= f_fine + 1e-12;
    }
    let secs = start.elapsed().as_secs_f64();
    report.check(
        "3 Lasso grid oracle",
        worst_coef <= GRID_COEF_TOL && worst_obj <= GRID_OBJ_TOL && beats_grid && secs < GRID_SECONDS,
        format!(
            "max coef diff {worst_coef:.2e} (tol {GRID_COEF_TOL:e}), max objective diff {worst_obj:.2e} \
             (tol {GRID_OBJ_TOL:e}), {secs:.1} s (limit {GRID_SECONDS} s)"
        ),
    );
}

fn monte_carlo_cell(alpha1: f64) -> (MonteCarloRun, f64) {
    let config = SimulationConfig {
        rho: 0.5,
        alpha1,
        replications: MC_REPS,
        tuning_mode: TuningMode::Once,
        ..SimulationConfig::default()
    };
    let truth = build_truth(&config).unwrap();
    let start = Instant::now();
    let run = run_monte_carlo(&truth, &config).unwrap();
    let t = run.shared_tuning.unwrap();
    println!(
        "     cell (rho 0.5, alpha1 {alpha1}): {} reps, {} failures, lambda {:.4}, lambda_node {:.4}, \
         lambda_node_m {:.4}, {:.0} s",
        run.summary.successes,
        run.summary.replication_failures,
        t.lambda,
        t.lambda_node,
        t.lambda_node_m,
        start.elapsed().as_secs_f64()
    );
    (run, truth.beta0[0])
}

fn decomposition_identity(report: &mut Report, run: &MonteCarloRun) {
    let worst = run.records.iter().map(|r| r.identity_residual).fold(0.0, f64::max);
    let k = run.records.len();
    report.check(
        "4 decomposition identity",
        k >= MIN_IDENTITY_REPS && run.failures.is_empty() && worst <= IDENTITY_TOL,
        format!(
            "max residual {worst:.2e} over {k} reps, {} failures (tol {IDENTITY_TOL:e})",
            run.failures.len()
        ),
    );
}

fn table_reproduction(report: &mut Report, run: &MonteCarloRun) {
    let s = &run.summary;
    report.check(
        "5a bias of desparsified estimator",
        within(s.abs_mean_bias_desparsified, BIAS_DESPARSIFIED),
        format!(
            "{:.3} (target {} ± {})",
            s.abs_mean_bias_desparsified, BIAS_DESPARSIFIED.0, BIAS_DESPARSIFIED.1
        ),
    );
    report.check(
        "5b bias of IV Lasso",
        within(s.abs_mean_bias_lasso, BIAS_LASSO),
        format!(
            "{:.3} (target {} ± {})",
            s.abs_mean_bias_lasso, BIAS_LASSO.0, BIAS_LASSO.1
        ),
    );
    report.check(
        "5c bias ordering",
        s.abs_mean_bias_desparsified < s.abs_mean_bias_lasso,
        format!(
            "desparsified {:.3} vs IV Lasso {:.3}",
            s.abs_mean_bias_desparsified, s.abs_mean_bias_lasso
        ),
    );
    report.check(
        "5d coverage",
        (COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(&s.coverage),
        format!(
            "{:.3} (range [{}, {}]), mean width {:.3}",
            s.coverage, COVERAGE_RANGE.0, COVERAGE_RANGE.1, s.mean_ci_width
        ),
    );
}

fn identification_strength(report: &mut Report, strong: &MonteCarloRun, weak: &MonteCarloRun) {
    let omegas: Vec<f64> = [1.0, 0.75, 0.5, 0.25]
        .iter()
        .map(|&alpha1| {
            let config = SimulationConfig {
                alpha1,
                ..SimulationConfig::default()
            };
            build_truth(&config).unwrap().omega2_pop
        })
        .collect();
    report.check(
        "6a population omega2 increasing",
        omegas.windows(2).all(|w| w[1] > w[0]),
        format!("{omegas:.3?} along alpha1 = 1, 0.75, 0.5, 0.25"),
    );
    let (ws, ww) = (strong.summary.mean_ci_width, weak.summary.mean_ci_width);
    report.check(
        "6b interval width grows as alpha1 falls",
        ww > ws,
        format!("mean width {ws:.3} at alpha1 = 1, {ww:.3} at alpha1 = 0.25"),
    );
    let (cs, cw) = (strong.summary.coverage, weak.summary.coverage);
    report.check(
        "6c coverage at alpha1 = 1",
        within(cs, COVERAGE_STRONG),
        format!("{cs:.3} (target {} ± {})", COVERAGE_STRONG.0, COVERAGE_STRONG.1),
    );
    report.check(
        "6d coverage at alpha1 = 0.25",
        within(cw, COVERAGE_WEAK),
        format!("{cw:.3} (target {} ± {})", COVERAGE_WEAK.0, COVERAGE_WEAK.1),
    );
}

fn thresholding_rate(report: &mut Report) {
    let c0 = TuningConfig::default().c0;
    let median_error = |n: usize| {
        let config = SimulationConfig {
            n,
            p: 50,
            q: 50,
            seed: 900,
            replications: 1,
            ..SimulationConfig::default()
        };
        let truth = build_truth(&config).unwrap();
        let errors: Vec<f64> = (0..RATE_DRAWS)
            .map(|rep| {
                let (data, _) = sample_dataset(&truth, &config, rep).unwrap();
                let m = threshold_cross_moment(data.z(), data.x(), c0).unwrap();
                matrix_one_norm(&(&m.m_hat - &truth.m_pop))
            })
            .collect();
        median(&errors)
    };
    let (small, large) = (median_error(200), median_error(3200));
    report.check(
        "7 thresholding rate",
        small >= RATE_FACTOR * large,
        format!(
            "median 1-norm error {small:.4} at n = 200, {large:.4} at n = 3200, ratio {:.2} (need >= {RATE_FACTOR})",
            small / large
        ),
    );
}

fn normality(report: &mut Report, run: &MonteCarloRun) {
    let stats = &run.summary.standardized_stats;
    let iqr = interquartile_range(stats);
    report.check(
        "8a standardized IQR",
        (iqr / NORMAL_IQR - 1.0).abs() <= IQR_REL_TOL,
        format!("{iqr:.3} (target {NORMAL_IQR} within {}%)", IQR_REL_TOL * 100.0),
    );
    let ks = ks_distance_normal(stats);
    report.check(
        "8b Kolmogorov-Smirnov distance",
        ks <= KS_MAX,
        format!("{ks:.3} (limit {KS_MAX})"),
    );
}

fn supplementary(report: &mut Report, run: &MonteCarloRun, beta1: f64) {
    let k = run.records.len() as f64;
    let closer = run
        .records
        .iter()
        .filter(|r| (r.beta_hat_1 - beta1).abs() < (r.beta_tilde_1 - beta1).abs())
        .count() as f64
        / k;
    report.check(
        "S1 desparsified closer than IV Lasso in a majority",
        closer > 0.5,
        format!("{:.1}% of replications", closer * 100.0),
    );
    let small_delta = run.records.iter().filter(|r| r.delta_sup < r.noise_sup).count() as f64 / k;
    report.check(
        "S2 remainder below noise term",
        small_delta >= DELTA_SHARE,
        format!(
            "{:.1}% of replications (need >= {}%)",
            small_delta * 100.0,
            DELTA_SHARE * 100.0
        ),
    );
    let size = 1.0 - run.summary.coverage;
    report.check(
        "S3 Wald test size at 5%",
        (SIZE_RANGE.0..=SIZE_RANGE.1).contains(&size),
        format!("rejection rate {size:.3} (range [{}, {}])", SIZE_RANGE.0, SIZE_RANGE.1),
    );
}

fn run_cli(threads: &str, out: &Path) {
    let out = out.to_string_lossy().into_owned();
    let args = [
        "hdiv",
        "--threads",
        threads,
        "simulate",
        "--n",
        "60",
        "--p",
        "30",
        "--q",
        "30",
        "--rho",
        "0.5",
        "--alpha1",
        "1",
        "--alpha1",
        "0.5",
        "--reps",
        "12",
        "--folds",
        "5",
        "--seed",
        "7",
        "--out",
        &out,
    ];
    let cli = hdiv_cli::Cli::try_parse_from(args).unwrap();
    hdiv_cli::run(&cli).unwrap();
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism(report: &mut Report) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_cli("1", a.path());
    run_cli("8", b.path());
    let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    report.check(
        "9 determinism across thread counts",
        !fa.is_empty() && fa == fb,
        format!("{} CSV files compared: {}", fa.len(), names.join(", ")),
    );
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut report = Report::default();

    two_stage_equivalence(&mut report);
    certificates(&mut report);
    lasso_grid_oracle(&mut report);
    thresholding_rate(&mut report);
    determinism(&mut report);

    let (strong, beta1) = monte_carlo_cell(1.0);
    decomposition_identity(&mut report, &strong);
    table_reproduction(&mut report, &strong);
    normality(&mut report, &strong);
    supplementary(&mut report, &strong, beta1);
    let (weak, _) = monte_carlo_cell(0.25);
    identification_strength(&mut report, &strong, &weak);

    let failed = report.failures();
    report.note(
        &format!("{} checks, {} failed", report.lines().len(), failed.len()),
        started.elapsed(),
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for l in &failed {
            println!("     failed: {}", l.label);
        }
        ExitCode::FAILURE
    }
}
