#![allow(dead_code)]

use hdiv_core::IVDataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| normal(rng))
}

/// Endogenous linear IV sample with strong instruments.
pub fn iv_sample(seed: u64, n: usize, p: usize, q: usize) -> IVDataset {
    let mut r = rng(seed);
    let z = gaussian(&mut r, n, q);
    let v = DVector::from_fn(n, |_, _| normal(&mut r));
    let pi = DMatrix::from_fn(q, p, |j, k| if j % p == k { 1.0 } else { 0.2 * normal(&mut r) });
    let x = &z * pi + DMatrix::from_fn(n, p, |i, _| 0.7 * v[i]);
    let beta = DVector::from_fn(p, |j, _| 1.0 + j as f64 * 0.5);
    let u = &v * 0.6 + DVector::from_fn(n, |_, _| 0.8 * normal(&mut r));
    let y = &x * beta + u;
    IVDataset::new(y, x, z).unwrap()
}
