//! Seed-documented synthetic dataset generators used by the benchmark
//! harness and the test suite. Identical seeds always reproduce identical
//! datasets.

use crate::error::Result;
use crate::glm::Dataset;
use crate::rng::SeededRng;

const STREAM: u64 = 0x5eed;

/// Gaussian-feature linear regression: x ~ N(0, I_p), y = <x, theta*> + eps
/// with theta* = (1, ..., 1)/sqrt(p) and eps ~ N(0, noise_sd^2).
pub fn gaussian_regression(n: usize, p: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    let mut rng = SeededRng::new(seed, STREAM);
    let coeff = 1.0 / (p as f64).sqrt();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
        let signal: f64 = x.iter().map(|v| coeff * v).sum();
        let noise = if noise_sd > 0.0 {
            noise_sd * rng.standard_normal()
        } else {
            0.0
        };
        rows.push(x);
        labels.push(signal + noise);
    }
    Dataset::new(rows, labels)
}

/// Linearly separable classification: x ~ N(0, I_p), y = sign(<x, theta*>)
/// with theta* = (1, ..., 1)/sqrt(p) and sign(0) taken as +1.
pub fn separable_logistic(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    let mut rng = SeededRng::new(seed, STREAM);
    let coeff = 1.0 / (p as f64).sqrt();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..p).map(|_| rng.standard_normal()).collect();
        let margin: f64 = x.iter().map(|v| coeff * v).sum();
        rows.push(x);
        labels.push(if margin >= 0.0 { 1.0 } else { -1.0 });
    }
    Dataset::new(rows, labels)
}

/// Rank-one features: every row is a scalar multiple of one direction with
/// all-nonzero entries, so the unmasked second-moment matrix has rank 1
/// while every column still carries energy.
pub fn rank_one_regression(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    let mut rng = SeededRng::new(seed, STREAM);
    let direction: Vec<f64> = (0..p).map(|j| 0.5 + 0.5 / (j + 1) as f64).collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = 0.5 + rng.uniform();
        rows.push(direction.iter().map(|v| c * v).collect());
        labels.push(c + 0.05 * rng.standard_normal());
    }
    Dataset::new(rows, labels)
}

/// i.i.d. Bernoulli(density) binary rows.
pub fn binary_rows(n: usize, p: usize, density: f64, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = SeededRng::new(seed, STREAM);
    (0..n)
        .map(|_| (0..p).map(|_| rng.bit(density)).collect())
        .collect()
}
