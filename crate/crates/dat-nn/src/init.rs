//! Deterministic parameter initialization.
//!
//! Every randomized component receives an explicit stream derived from the
//! run seed and a label, so construction order changes in unrelated code do
//! not shift anyone else's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dat_tensor::{Scalar, Tensor};

/// Splittable deterministic RNG stream.
#[derive(Clone)]
pub struct RngStream {
    seed: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed }
    }

    /// Child stream for a named component.
    pub fn derive(&self, label: &str) -> RngStream {
        RngStream {
            seed: fnv1a(self.seed, label.as_bytes()),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Truncated normal: resample anything beyond two standard deviations.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = rng.sample::<f64, _>(StandardNormal) * std;
        if v.abs() <= 2.0 * std {
            data.push(T::from_f64(v));
        }
    }
    Tensor::param(shape.to_vec(), data).expect("consistent shape")
}

pub fn zeros_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape.to_vec(), vec![T::zero(); n]).expect("consistent shape")
}

pub fn ones_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape.to_vec(), vec![T::one(); n]).expect("consistent shape")
}
