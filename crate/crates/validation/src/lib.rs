//! Summary statistics and reporting for the acceptance suite.

use std::time::Duration;

use hdiv_core::inference::normal_cdf;
use nalgebra::DMatrix;

/// Linear-interpolation quantile of sorted data (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn interquartile_range(sorted: &[f64]) -> f64 {
    quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Kolmogorov–Smirnov distance between the empirical cdf of sorted data and N(0, 1).
pub fn ks_distance_normal(sorted: &[f64]) -> f64 {
    let k = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            ((i + 1) as f64 / k - f).max(f - i as f64 / k)
        })
        .fold(0.0, f64::max)
}

/// Maximum absolute column sum.
pub fn matrix_one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct Line {
    pub label: String,
    pub passed: bool,
    pub detail: String,
}

/// Collects one PASS/FAIL line per check and prints it as it arrives.
#[derive(Debug, Default)]
pub struct Report {
    lines: Vec<Line>,
}

impl Report {
    pub fn check(&mut self, label: &str, passed: bool, detail: String) {
        println!("{} {label}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.lines.push(Line {
            label: label.to_string(),
            passed,
            detail,
        });
    }

    pub fn note(&self, text: &str, elapsed: Duration) {
        println!("     {text} ({:.1} s)", elapsed.as_secs_f64());
    }

    pub fn failures(&self) -> Vec<&Line> {
        self.lines.iter().filter(|l| !l.passed).collect()
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }
}
