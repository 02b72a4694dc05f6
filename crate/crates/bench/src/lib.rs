//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `count` rows of `width` uniform values in `[0, 1)`.
pub fn uniform_rows(count: usize, width: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..width).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// `count` uniform critic scores in `[-3, 3)`.
pub fn scores(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(-3.0..3.0)).collect()
}
