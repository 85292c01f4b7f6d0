//! Desparsified IV Lasso: estimation and inference for a structural
//! parameter β⁰ in the linear instrumental-variables model
//! `Y = Xᵀβ⁰ + U`, `E[UZ] = 0`, when the numbers of regressors `p` and
//! instruments `q ≥ p` may exceed the sample size.
//!
//! The pipeline is
//!
//! 1. [`matrices`]: nodewise precision estimate Θ̂ of `E[ZZᵀ]⁻¹`, thresholded
//!    cross moment M̂ of `E[ZXᵀ]`, and the nodewise inverse Θ̂ᴹ of `M̂ᵀΘ̂M̂`;
//! 2. [`estimator`]: the IV Lasso β̃ and its one-step desparsification β̂;
//! 3. [`inference`]: covariance estimates, confidence intervals and Wald
//!    tests for linear functionals `aᵀβ⁰`.
//!
//! [`tuning`] selects penalties by K-fold cross-validation and
//! [`simulation`] runs the Gaussian Monte Carlo design with reproducible
//! per-replication seeding.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod inference;
pub mod lasso;
pub mod matrices;
pub mod model;
pub mod simulation;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{validate_dataset, IVDataset, TuningConfig};
