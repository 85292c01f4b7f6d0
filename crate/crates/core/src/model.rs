//! Observed sample and tuning parameters shared by every estimation step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An observed instrumental-variables sample `(Y, X, Z)`.
///
/// `x` is `n × p` (endogenous and exogenous regressors), `z` is `n × q`
/// (instruments plus exogenous regressors). Exogenous regressors that appear
/// in both blocks are stored twice, once in each matrix.
///
/// Values are only obtainable through [`IVDataset::new`] or
/// [`validate_dataset`], so a constructed dataset always satisfies
/// `n ≥ 2`, `p ≥ 1`, `q ≥ p`, equal row counts and finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct IVDataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
}

impl IVDataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        check_invariants(&y, &x, &z)?;
        Ok(Self { y, x, z })
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.y, self.x, self.z)
    }

    /// Subsample of the given rows, in the given order.
    ///
    /// Fails when fewer than two rows are selected.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let x = self.x.select_rows(rows);
        let z = self.z.select_rows(rows);
        Self::new(y, x, z)
    }

    /// Copy with every column of Y, X and Z shifted to zero sample mean.
    pub fn centered(&self) -> Self {
        fn center_cols(m: &DMatrix<f64>) -> DMatrix<f64> {
            let mut out = m.clone();
            for mut col in out.column_iter_mut() {
                let mean = col.mean();
                col.add_scalar_mut(-mean);
            }
            out
        }
        let y_mean = self.y.mean();
        Self {
            y: self.y.add_scalar(-y_mean),
            x: center_cols(&self.x),
            z: center_cols(&self.z),
        }
    }

    /// `ZᵀX / n`.
    pub fn cross_moment(&self) -> DMatrix<f64> {
        self.z.tr_mul(&self.x) / self.n() as f64
    }

    /// `ZᵀY / n`.
    pub fn instrument_moment(&self) -> DVector<f64> {
        self.z.tr_mul(&self.y) / self.n() as f64
    }
}

/// Checks the dataset invariants and hands the value back unchanged.
pub fn validate_dataset(data: IVDataset) -> Result<IVDataset> {
    check_invariants(&data.y, &data.x, &data.z)?;
    Ok(data)
}

fn check_invariants(y: &DVector<f64>, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<()> {
    let n = y.len();
    if x.nrows() != n || z.nrows() != n {
        return Err(Error::RowMismatch(format!(
            "Y has {} rows, X has {} rows, Z has {} rows",
            n,
            x.nrows(),
            z.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 observations, got {n}")));
    }
    if x.ncols() == 0 {
        return Err(Error::Validation("X has no columns".into()));
    }
    if z.ncols() < x.ncols() {
        return Err(Error::UnderIdentified {
            p: x.ncols(),
            q: z.ncols(),
        });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: "Y",
            row: i,
            col: 0,
        });
    }
    for (name, m) in [("X", x), ("Z", z)] {
        // nalgebra is column-major; report the first offending cell in row order
        let bad = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .find(|&(i, j)| !m[(i, j)].is_finite());
        if let Some((row, col)) = bad {
            return Err(Error::NonFinite { name, row, col });
        }
    }
    Ok(())
}

/// Penalty levels and solver controls for one estimation pass.
///
/// The Lasso convention throughout is `βᵀQβ − 2cᵀβ + 2λ‖β‖₁`, so `lambda`
/// here is half of the coefficient used by solvers that write `λ‖β‖₁`
/// against a `½`-scaled loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    /// Penalty of the IV Lasso for β.
    pub lambda: f64,
    /// Shared penalty of the nodewise regressions for Θ̂.
    pub lambda_node: f64,
    /// Shared penalty of the nodewise regressions for Θ̂ᴹ.
    pub lambda_node_m: f64,
    /// Thresholding constant for the cross moment.
    pub c0: f64,
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lambda_node: 0.1,
            lambda_node_m: 0.1,
            c0: 0.5,
            max_sweeps: 10_000,
            tol: 1e-8,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("lambda_node", self.lambda_node),
            ("lambda_node_m", self.lambda_node_m),
            ("c0", self.c0),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::Validation(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::Validation("max_sweeps must be positive".into()));
        }
        Ok(())
    }
}
