//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ms2d_core::{FeatureMap, GridShape, TokenSequence};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_sequence(seed: u64, len: usize, channels: usize) -> TokenSequence {
    let mut r = rng(seed);
    let data = (0..len * channels).map(|_| r.random_range(-1.0..1.0)).collect();
    TokenSequence::from_vec(len, channels, data).expect("length matches")
}

pub fn random_map(seed: u64, side: usize, channels: usize) -> FeatureMap {
    let mut r = rng(seed);
    let shape = GridShape::square(side).expect("side > 0");
    FeatureMap::from_fn(shape, channels, |_, _, _| r.random_range(-1.0..1.0))
}
