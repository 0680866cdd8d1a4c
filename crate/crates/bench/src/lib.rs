//! Shared inputs for the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vesselgan::datapipe::{gen_phantom, PhantomConfig, SamplePair};
use vesselgan::Tensor;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn phantom(seed: u64, side: usize) -> SamplePair {
    gen_phantom(seed, side, &PhantomConfig::default()).expect("default phantom config is valid")
}
