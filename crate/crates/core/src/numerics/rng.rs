//! Seeded random sources. All randomness in the crate flows through here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a label.
pub fn derive(seed: u64, stream: u64) -> Rng64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian<T: Real>(rng: &mut Rng64, dims: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n = dims.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::from_parts(dims.to_vec(), data)
}

pub fn uniform<T: Real>(rng: &mut Rng64, dims: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect();
    Tensor::from_parts(dims.to_vec(), data)
}
