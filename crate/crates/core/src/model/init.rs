//! Seeded, name-keyed parameter initialization.
//!
//! Each parameter draws from its own stream derived from `(seed, name)`, so a
//! parameter's initial value does not depend on which other modules exist or
//! the order they are built in. A LoRA decoder's frozen base weights therefore
//! equal the dense decoder's weights for the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Parameter, TensorError};

pub const DEFAULT_STD: f32 = 0.02;

fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

pub fn normal_values(seed: u64, name: &str, numel: usize, std: f32) -> Vec<f32> {
    let mut rng = stream(seed, name);
    let dist = Normal::new(0.0f32, std).expect("std is positive and finite");
    (0..numel).map(|_| dist.sample(&mut rng)).collect()
}

pub fn normal(seed: u64, name: &str, shape: &[usize], std: f32) -> Result<Parameter, TensorError> {
    let n = shape.iter().product();
    Parameter::new(name, shape, normal_values(seed, name, n, std))
}

pub fn filled(name: &str, shape: &[usize], value: f32) -> Result<Parameter, TensorError> {
    let n = shape.iter().product();
    Parameter::new(name, shape, vec![value; n])
}
