//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdm_core::geometry::Point3;
use rdm_core::numerics::Matrix;
use rdm_core::roformer::{AttentionWeights, EmbeddingKind};
use rdm_core::Result;

/// Features and positions of `n` random nodes spread over an 80 m square.
pub fn random_nodes(n: usize, dim: usize, seed: u64) -> (Matrix, Vec<Point3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Matrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
    let p = (0..n)
        .map(|_| Point3::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-2.0..4.0)))
        .collect();
    (f, p)
}

pub fn stack(kind: EmbeddingKind, dim: usize, rounds: usize, seed: u64) -> Result<AttentionWeights> {
    AttentionWeights::random(kind, dim, rounds, 1, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random score matrix for the Sinkhorn benchmark.
pub fn random_scores(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_seeded() {
        let (a, pa) = random_nodes(5, 4, 1);
        let (b, pb) = random_nodes(5, 4, 1);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(random_scores(2, 3, 7), random_scores(2, 3, 7));
        assert_eq!(stack(EmbeddingKind::Rotary, 8, 1, 0).unwrap().dim(), 8);
    }
}
