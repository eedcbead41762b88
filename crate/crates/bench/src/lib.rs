//! Seeded inputs shared by the benchmarks.

use lorashift_core::{Matrix, WeightMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// `rows × cols` weight of exact rank `rank`.
pub fn low_rank_weight(rows: usize, cols: usize, rank: usize, seed: u64) -> WeightMatrix {
    WeightMatrix::new(gaussian(rows, rank, seed) * gaussian(rank, cols, seed + 1)).expect("finite gaussian")
}
