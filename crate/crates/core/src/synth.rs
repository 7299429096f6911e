//! Seeded synthetic datasets for tests, demos and the acceptance suite.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::Result;

/// Isotropic Gaussian blobs; label `c` for `centers[c]`.
pub fn blobs(centers: &[Vec<f64>], per_class: usize, sd: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sd).expect("finite sd");
    let d = centers[0].len();
    let mut flat = Vec::with_capacity(centers.len() * per_class * d);
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            flat.extend(center.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(c as i64);
        }
    }
    let n = labels.len();
    Dataset::new(Array2::from_shape_vec((n, d), flat).expect("shape"), Some(labels))
}

/// `classes` Gaussian clusters with centers drawn from `N(0, spread²)` in `d`
/// dimensions.
pub fn gaussian_mixture(classes: usize, per_class: usize, d: usize, spread: f64, sd: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let n = Normal::new(0.0, spread).expect("finite spread");
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..d).map(|_| n.sample(&mut rng)).collect()).collect();
    blobs(&centers, per_class, sd, seed)
}

/// Two concentric rings (label 0 inside, 1 outside) in the first two
/// coordinates, followed by `noise_dims` pure-noise coordinates.
pub fn concentric_circles(
    per_class: usize,
    radii: (f64, f64),
    ring_sd: f64,
    noise_dims: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ring = Normal::new(0.0, ring_sd).expect("finite sd");
    let noise = Normal::new(0.0, noise_sd).expect("finite sd");
    let d = 2 + noise_dims;
    let mut flat = Vec::with_capacity(2 * per_class * d);
    let mut labels = Vec::new();
    for (c, r) in [radii.0, radii.1].into_iter().enumerate() {
        for _ in 0..per_class {
            let theta = rng.random_range(0.0..2.0 * PI);
            let rad = r + ring.sample(&mut rng);
            flat.push(rad * theta.cos());
            flat.push(rad * theta.sin());
            flat.extend((0..noise_dims).map(|_| noise.sample(&mut rng)));
            labels.push(c as i64);
        }
    }
    let n = labels.len();
    Dataset::new(Array2::from_shape_vec((n, d), flat).expect("shape"), Some(labels))
}

/// Uniform points in `[-1, 1]^d`, unlabeled.
pub fn uniform(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Dataset::new(Array2::from_shape_vec((n, d), flat).expect("shape"), None)
}
