#![allow(dead_code)]

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

pub fn gaussian_points(
    rng: &mut ChaCha8Rng,
    center: &[f64],
    sd: f64,
    n: usize,
) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| {
            DVector::from_fn(center.len(), |j, _| {
                center[j] + sd * rng.sample::<f64, _>(StandardNormal)
            })
        })
        .collect()
}

pub fn normal_1d(rng: &mut ChaCha8Rng, mean: f64, sd: f64, n: usize) -> Vec<DVector<f64>> {
    gaussian_points(rng, &[mean], sd, n)
}

/// Points from `k` unit-sd blobs whose centers sit `spacing` apart along
/// the first axes.
pub fn separated_blobs(
    rng: &mut ChaCha8Rng,
    d: usize,
    k: usize,
    spacing: f64,
    n_each: usize,
) -> Vec<DVector<f64>> {
    let mut out = Vec::new();
    for c in 0..k {
        let mut center = vec![0.0; d];
        center[c % d] = spacing * (1 + c / d) as f64;
        out.extend(gaussian_points(rng, &center, 1.0, n_each));
    }
    out
}
