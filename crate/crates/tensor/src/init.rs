//! Seeded parameter initialisation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(data, shape).expect("shape and data length agree")
}

/// Uniform in `±sqrt(1 / fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let a = fan_in_uniform(&[4, 3, 3, 3], 27, &mut seeded_rng(7));
        let b = fan_in_uniform(&[4, 3, 3, 3], 27, &mut seeded_rng(7));
        assert_eq!(a.data(), b.data());
        let bound = (1.0f64 / 27.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
