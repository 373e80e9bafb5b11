use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{numel, Float, Tensor};

impl<T: Float> Tensor<T> {
    /// Draws i.i.d. `N(0, std²)` values from `rng` (sampled in f64, then cast).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
        let normal = Normal::new(0.0, std).expect("finite non-negative std");
        let data = (0..numel(shape))
            .map(|_| T::lit(normal.sample(rng)))
            .collect();
        Tensor::leaf(data, shape.to_vec(), false)
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
        let data = (0..numel(shape))
            .map(|_| T::lit(rng.gen_range(lo..hi)))
            .collect();
        Tensor::leaf(data, shape.to_vec(), false)
    }
}
