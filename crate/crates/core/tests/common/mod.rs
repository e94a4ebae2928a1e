#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raid::ot::Histogram;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

/// Strictly positive random weights summing to one.
pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let w: Array1<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s = w.sum();
    w / s
}

pub fn random_hist(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Histogram {
    let atoms = random_points(rng, n, d);
    let w = random_weights(rng, n);
    Histogram::new(atoms, w).unwrap()
}

pub fn uniform_hist(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Histogram {
    Histogram::uniform(random_points(rng, n, d)).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Two Gaussian classes in `dim` dimensions centred at `+-sep * e1`, labels 1 and 2.
pub fn two_gaussians(per_class: usize, dim: usize, sep: f64, std: f64, seed: u64) -> (Array2<f64>, Vec<u32>) {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let noise = Normal::new(0.0, std).unwrap();
    let n = 2 * per_class;
    let labels: Vec<u32> = (0..n).map(|i| if i < per_class { 1 } else { 2 }).collect();
    let x = Array2::from_shape_fn((n, dim), |(i, j)| {
        let centre = if j == 0 {
            if labels[i] == 1 { sep } else { -sep }
        } else {
            0.0
        };
        centre + noise.sample(&mut r)
    });
    (x, labels)
}
