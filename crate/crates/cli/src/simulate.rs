//! `hdiv simulate`: Monte Carlo grid over endogeneity and instrument strength.

use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use hdiv_core::inference::normal_quantile;
use hdiv_core::simulation::{build_truth, run_monte_carlo, SimulationConfig, TuningMode, GENERATOR_ID};
use hdiv_core::tuning::CVConfig;
use hdiv_core::TuningConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::estimate::read_config;
use crate::io::{fmt_float, write_csv, write_json};
use crate::manifest::{config_digest, timestamp, RunManifest, TOOL_VERSION};
use crate::svg::qq_plot_svg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TuningChoice {
    PerRep,
    Once,
}

impl From<TuningChoice> for TuningMode {
    fn from(t: TuningChoice) -> Self {
        match t {
            TuningChoice::PerRep => TuningMode::PerRep,
            TuningChoice::Once => TuningMode::Once,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    /// Endogeneity level; repeat for a grid.
    #[arg(long)]
    pub rho: Vec<f64>,
    /// Instrument strength; repeat for a grid.
    #[arg(long)]
    pub alpha1: Vec<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long, value_enum)]
    pub tuning: Option<TuningChoice>,
    /// Fixed IV Lasso penalty; with both nodewise penalties it skips tuning.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_node: Option<f64>,
    #[arg(long)]
    pub lambda_node_m: Option<f64>,
    #[arg(long)]
    pub c0: Option<f64>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub rho: Option<Vec<f64>>,
    pub alpha1: Option<Vec<f64>>,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub q: Option<usize>,
    pub reps: Option<usize>,
    pub seed: Option<u64>,
    pub level: Option<f64>,
    pub tuning: Option<TuningChoice>,
    pub lambda: Option<f64>,
    pub lambda_node: Option<f64>,
    pub lambda_node_m: Option<f64>,
    pub c0: Option<f64>,
    pub lambda0: Option<f64>,
    pub folds: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateConfig {
    pub rho: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    pub tuning: TuningChoice,
    /// `(λ, λ_node, λ_node_m)` when all three are fixed.
    pub fixed_penalties: Option<[f64; 3]>,
    pub c0: f64,
    pub lambda0: Option<f64>,
    pub folds: usize,
    pub out: PathBuf,
}

impl SimulateConfig {
    pub fn resolve(args: &SimulateArgs) -> Result<Self> {
        let file: SimulateFile = read_config(args.config.as_deref())?;
        let sim = SimulationConfig::default();
        let pick = |flag: &Vec<f64>, file: Option<Vec<f64>>, default: &[f64]| {
            if !flag.is_empty() {
                flag.clone()
            } else {
                file.unwrap_or_else(|| default.to_vec())
            }
        };
        let penalties = [
            args.lambda.or(file.lambda),
            args.lambda_node.or(file.lambda_node),
            args.lambda_node_m.or(file.lambda_node_m),
        ];
        let fixed_penalties = match penalties {
            [Some(a), Some(b), Some(c)] => Some([a, b, c]),
            [None, None, None] => None,
            _ => {
                return Err(CliError::Input(
                    "--lambda, --lambda-node and --lambda-node-m must be given together".into(),
                ))
            }
        };
        Ok(Self {
            rho: pick(&args.rho, file.rho, &[0.7, 0.5, 0.3]),
            alpha1: pick(&args.alpha1, file.alpha1, &[1.0, 0.75, 0.5, 0.25]),
            n: args.n.or(file.n).unwrap_or(sim.n),
            p: args.p.or(file.p).unwrap_or(sim.p),
            q: args.q.or(file.q).unwrap_or(sim.q),
            reps: args.reps.or(file.reps).unwrap_or(sim.replications),
            seed: args.seed.or(file.seed).unwrap_or(sim.seed),
            level: args.level.or(file.level).unwrap_or(sim.level),
            tuning: args.tuning.or(file.tuning).unwrap_or(TuningChoice::Once),
            fixed_penalties,
            c0: args.c0.or(file.c0).unwrap_or(sim.base_tuning.c0),
            lambda0: args.lambda0.or(file.lambda0),
            folds: args.folds.or(file.folds).unwrap_or(sim.cv.folds),
            out: args
                .out
                .clone()
                .or(file.out)
                .unwrap_or_else(|| PathBuf::from("hdiv-sim")),
        })
    }

    /// Core configuration of one grid cell.
    pub fn cell(&self, rho: f64, alpha1: f64) -> SimulationConfig {
        let base_tuning = TuningConfig {
            c0: self.c0,
            ..TuningConfig::default()
        };
        SimulationConfig {
            n: self.n,
            p: self.p,
            q: self.q,
            rho,
            alpha1,
            replications: self.reps,
            seed: self.seed,
            level: self.level,
            tuning_mode: self.tuning.into(),
            fixed_tuning: self.fixed_penalties.map(|[l, ln, lm]| TuningConfig {
                lambda: l,
                lambda_node: ln,
                lambda_node_m: lm,
                ..base_tuning
            }),
            base_tuning,
            cv: CVConfig {
                folds: self.folds,
                seed: self.seed,
                ..CVConfig::default()
            },
            lambda0: self.lambda0,
        }
    }

    pub fn deviations(&self) -> Vec<String> {
        let mut d = vec![
            "IV Lasso quadratic form uses the PSD projection of the symmetrized instrument precision estimate"
                .to_string(),
        ];
        match (self.fixed_penalties, self.tuning) {
            (Some(_), _) => d.push("penalties fixed by the user; no cross-validation".into()),
            (None, TuningChoice::Once) => {
                d.push("tune-once: penalties cross-validated on replication 0 of each cell and reused".into())
            }
            (None, TuningChoice::PerRep) => {}
        }
        if self.p < self.q {
            d.push("p < q: regressors 2..p are instruments 2..p; instruments p+1..q enter only X1".into());
        }
        d
    }
}

/// Plotting positions `Φ⁻¹((i − 0.5)/k)`.
pub fn normal_scores(k: usize) -> Vec<f64> {
    (1..=k)
        .map(|i| normal_quantile((i as f64 - 0.5) / k as f64).expect("positions lie in (0, 1)"))
        .collect()
}

pub fn cell_tag(rho: f64, alpha1: f64) -> String {
    format!("{rho}_{alpha1}")
}

#[derive(Debug, Serialize)]
struct CellSummary {
    rho: f64,
    alpha1: f64,
    omega2_pop: f64,
    penalties: Option<TuningConfig>,
    abs_mean_bias_desparsified: f64,
    abs_mean_bias_lasso: f64,
    coverage: f64,
    mean_width: f64,
    successes: usize,
    failures: usize,
    failure_messages: Vec<(u64, String)>,
}

#[derive(Debug, Serialize)]
struct SummaryJson {
    manifest_digest: String,
    generator: &'static str,
    cells: Vec<CellSummary>,
}

pub fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let started_at = timestamp();
    let cfg = SimulateConfig::resolve(args)?;
    if cfg.rho.is_empty() || cfg.alpha1.is_empty() {
        return Err(CliError::Input("empty rho or alpha1 grid".into()));
    }
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::io(&cfg.out, e))?;
    let config_json = serde_json::to_value(&cfg).map_err(|e| CliError::Input(e.to_string()))?;
    let digest = config_digest(&config_json);

    let mut table = Vec::new();
    let mut cells = Vec::new();
    let mut outputs = vec!["table1.csv".to_string(), "summary.json".to_string()];
    for &rho in &cfg.rho {
        for &alpha1 in &cfg.alpha1 {
            let sim = cfg.cell(rho, alpha1);
            let truth = build_truth(&sim)?;
            let run = run_monte_carlo(&truth, &sim)?;
            let s = &run.summary;
            table.push(vec![
                fmt_float(rho),
                fmt_float(alpha1),
                fmt_float(s.abs_mean_bias_desparsified),
                fmt_float(s.abs_mean_bias_lasso),
                fmt_float(s.coverage),
                fmt_float(s.mean_ci_width),
                s.replication_failures.to_string(),
            ]);

            let tag = cell_tag(rho, alpha1);
            let scores = normal_scores(s.standardized_stats.len());
            let qq: Vec<Vec<String>> = scores
                .iter()
                .zip(&s.standardized_stats)
                .map(|(t, e)| vec![fmt_float(*t), fmt_float(*e)])
                .collect();
            let qq_name = format!("qq_{tag}.csv");
            write_csv(
                &cfg.out.join(&qq_name),
                &["theoretical_quantile", "empirical_quantile"],
                &qq,
            )?;
            let svg_name = format!("qq_{tag}.svg");
            let title = format!("Normal Q-Q plot, rho = {rho}, alpha1 = {alpha1}");
            let svg = qq_plot_svg(&scores, &s.standardized_stats, &title);
            fs::write(cfg.out.join(&svg_name), svg).map_err(|e| CliError::io(cfg.out.join(&svg_name), e))?;

            let rec_name = format!("replications_{tag}.csv");
            let recs: Vec<Vec<String>> = run
                .records
                .iter()
                .map(|r| {
                    vec![
                        r.index.to_string(),
                        fmt_float(r.beta_tilde_1),
                        fmt_float(r.beta_hat_1),
                        fmt_float(r.interval.lower),
                        fmt_float(r.interval.upper),
                        u8::from(r.covered).to_string(),
                        fmt_float(r.standardized),
                        fmt_float(r.sigma_hat),
                        fmt_float(r.identity_residual),
                    ]
                })
                .collect();
            write_csv(
                &cfg.out.join(&rec_name),
                &[
                    "replication",
                    "beta_tilde_1",
                    "beta_hat_1",
                    "lower",
                    "upper",
                    "covered",
                    "standardized",
                    "sigma_hat",
                    "identity_residual",
                ],
                &recs,
            )?;
            outputs.extend([qq_name, svg_name, rec_name]);
            cells.push(CellSummary {
                rho,
                alpha1,
                omega2_pop: truth.omega2_pop,
                penalties: run.shared_tuning,
                abs_mean_bias_desparsified: s.abs_mean_bias_desparsified,
                abs_mean_bias_lasso: s.abs_mean_bias_lasso,
                coverage: s.coverage,
                mean_width: s.mean_ci_width,
                successes: s.successes,
                failures: s.replication_failures,
                failure_messages: run.failures.clone(),
            });
        }
    }

    write_csv(
        &cfg.out.join("table1.csv"),
        &[
            "rho",
            "alpha1",
            "abs_mean_bias_desparsified",
            "abs_mean_bias_lasso",
            "coverage",
            "mean_width",
            "failures",
        ],
        &table,
    )?;
    write_json(
        &cfg.out.join("summary.json"),
        &SummaryJson {
            manifest_digest: digest.clone(),
            generator: GENERATOR_ID,
            cells,
        },
    )?;
    let manifest = RunManifest {
        command: "simulate".into(),
        config: config_json,
        config_digest: digest,
        seed: cfg.seed,
        tool_version: TOOL_VERSION.into(),
        generator: Some(GENERATOR_ID.into()),
        started_at,
        finished_at: timestamp(),
        deviations: cfg.deviations(),
        outputs,
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)
}
