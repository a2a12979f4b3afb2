//! Seeded inputs shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schedkd::ldc::{LdcConfig, LdcModel, LdcShape, PackedLdcModel};
use schedkd::vsa::Hypervector;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn hypervectors(n: usize, dim: usize, seed: u64) -> Vec<Hypervector> {
    let mut r = rng(seed);
    (0..n).map(|_| Hypervector::random(dim, &mut r)).collect()
}

/// Benchmark-sized student: 32 features, 16 levels, 5 classes.
pub fn shape(feature_dim: usize) -> LdcShape {
    LdcShape {
        num_features: 32,
        num_levels: 16,
        feature_dim,
        value_dim: 4,
        num_classes: 5,
    }
}

pub fn student(shape: LdcShape, seed: u64) -> LdcModel {
    LdcModel::new(LdcConfig::new(shape), &mut rng(seed)).expect("valid shape")
}

pub fn packed(shape: LdcShape, seed: u64) -> PackedLdcModel {
    student(shape, seed).export_inference()
}

pub fn samples(shape: LdcShape, n: usize, seed: u64) -> Vec<Vec<u16>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            (0..shape.num_features)
                .map(|_| r.random_range(0..shape.num_levels as u16))
                .collect()
        })
        .collect()
}
