//! Deterministic seeding.
//!
//! Every random stream is derived from one master seed by hashing
//! `(seed, module, purpose, index)` with SHA-256 and taking the first eight
//! bytes little-endian. The streams themselves are ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::{Chunk, Frame};

pub type Stream = ChaCha8Rng;

pub fn derive_seed(seed: u64, module: &str, purpose: &str) -> u64 {
    derive_indexed(seed, module, purpose, 0)
}

pub fn derive_indexed(seed: u64, module: &str, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((module.len() as u64).to_le_bytes());
    h.update(module.as_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64, module: &str, purpose: &str) -> Stream {
    Stream::seed_from_u64(derive_seed(seed, module, purpose))
}

pub fn indexed_stream(seed: u64, module: &str, purpose: &str, index: u64) -> Stream {
    Stream::seed_from_u64(derive_indexed(seed, module, purpose, index))
}

pub fn normal<T: Scalar>(rng: &mut Stream) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(z)
}

pub fn normal_vec<T: Scalar>(rng: &mut Stream, n: usize) -> Vec<T> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn normal_frame<T: Scalar>(rng: &mut Stream, dim: usize) -> Frame<T> {
    Frame::from_vec_unchecked(normal_vec(rng, dim))
}

pub fn normal_chunk<T: Scalar>(rng: &mut Stream, len: usize, dim: usize) -> Chunk<T> {
    Chunk::from_flat(dim, normal_vec(rng, len * dim)).expect("dim divides len * dim")
}
