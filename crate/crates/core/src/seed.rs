//! Seed fan-out.
//!
//! A single run seed is split into named sub-seeds so that each consumer
//! (parameter init, buffer sampling, negative sampling, ...) owns an
//! independent stream. Adding a new consumer never shifts the draws of an
//! existing one because sub-seeds depend only on `(root, name)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Sub-tree for a named consumer.
    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree {
            root: splitmix64(self.root ^ fnv1a(name.as_bytes())),
        }
    }

    pub fn seed(&self, name: &str) -> u64 {
        self.child(name).root
    }

    pub fn rng(&self, name: &str) -> Rng {
        ChaCha8Rng::seed_from_u64(self.seed(name))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
