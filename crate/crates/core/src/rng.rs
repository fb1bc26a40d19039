//! Seed derivation.
//!
//! A run owns one root seed. Every subsystem draws from a generator derived
//! from that seed plus a fixed label path, so draws in one subsystem never
//! shift the stream of another and any stream can be recreated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn child(self, label: &str) -> Self {
        Self(splitmix64(self.0 ^ splitmix64(hash_label(label))))
    }

    pub fn index(self, i: u64) -> Self {
        Self(splitmix64(self.0.wrapping_add(splitmix64(i ^ 0x5851_f42d_4c95_7f2d))))
    }

    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }

    pub fn rng_for(self, label: &str) -> Rng {
        self.child(label).rng()
    }
}
