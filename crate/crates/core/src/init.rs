//! Parameter initialisation (BERT convention).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Normal(0, 0.02) samples redrawn until within two standard deviations.
pub fn truncated_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}

pub fn ones(shape: &[usize]) -> Tensor {
    Tensor::filled(shape, 1.0)
}

/// Standard Gumbel(0, 1) sample.
pub fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    // random::<f64>() is in [0, 1); shift away from 0 so ln stays finite.
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}
