//! Seedable, splittable random source shared by initialization, dropout,
//! shuffling and sampling.
//!
//! Every random decision in a run descends from one master seed. Child
//! streams are derived by hashing `(seed, key)` so that independent parts of
//! a run (one MC chunk, one training epoch, one experiment repetition) get
//! decorrelated generators regardless of evaluation order.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream key.
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    mix64(mix64(seed) ^ key.rotate_left(32) ^ 0xD1B5_4A32_D192_ED03)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// The seed this generator was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A generator for the child stream `key`; does not advance `self`.
    pub fn stream(&self, key: u64) -> Rng {
        Rng::from_seed(derive_seed(self.seed, key))
    }

    /// A generator for a two-level key such as `(iteration, chunk)`.
    pub fn stream2(&self, a: u64, b: u64) -> Rng {
        Rng::from_seed(derive_seed(derive_seed(self.seed, a), b))
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
