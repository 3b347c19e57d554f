//! Seeded random number generation with name-keyed stream splitting.
//!
//! Every stream is derived from a 64-bit key. `split` derives an independent
//! child stream from the parent's key and a label, so adding a draw site does
//! not perturb the streams of existing sites. Identical seed and identical
//! call sequence always reproduce the same values.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

// SplitMix64 finalizer; mixes a derived key into a well-distributed one.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Splittable seeded generator.
#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    stream: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self::from_key(mix(seed))
    }

    fn from_key(key: u64) -> Self {
        Rng {
            key,
            stream: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Derive an independent child stream keyed by `label`.
    ///
    /// The child depends only on this generator's key and the label, never on
    /// how many values the parent has produced.
    pub fn split(&self, label: &str) -> Rng {
        Rng::from_key(mix(self.key ^ fnv1a(label.as_bytes())))
    }

    /// Derive an independent child stream keyed by an index.
    pub fn split_index(&self, index: u64) -> Rng {
        Rng::from_key(mix(self.key ^ mix(index.wrapping_add(0x517cc1b727220a95))))
    }

    /// One draw from N(0,1).
    pub fn standard_normal(&mut self) -> f64 {
        self.stream.sample(StandardNormal)
    }

    /// `n` draws from N(0,1).
    pub fn standard_normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Tensor of N(0,1) draws with the given shape.
    pub fn standard_normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), self.standard_normal_vec(n))
            .expect("shape/product invariant")
    }

    /// One draw from U[0,1).
    pub fn uniform(&mut self) -> f64 {
        self.stream.gen::<f64>()
    }

    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    /// Uniform integer in [0, bound).
    pub fn below(&mut self, bound: usize) -> usize {
        self.stream.gen_range(0..bound)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
