//! Seeded random number generation.
//!
//! Everything stochastic in the crate (weight init, toy-data synthesis, crop
//! sampling, jitter) draws from a single xoshiro256** stream so that a
//! `(config, seed)` pair fully determines all output bytes.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;

use crate::tensor::Tensor;

pub struct Rng(Xoshiro256StarStar);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Derive an independent sub-stream, e.g. one per corpus image.
    pub fn fork(&mut self, tag: u64) -> Self {
        Rng(Xoshiro256StarStar::seed_from_u64(
            self.0.gen::<u64>() ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ))
    }

    /// Uniform in [0, 1).
    pub fn f64(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Tensor of i.i.d. N(0, scale^2) entries.
    pub fn gauss(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.normal() * scale).collect();
        Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
    }
}
