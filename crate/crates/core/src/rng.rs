//! Named, splittable random streams.
//!
//! Every consumer of randomness asks for a stream by name (and optionally an
//! index). The stream key is a hash of the root seed and the path, so scene
//! generation, parameter initialisation and reparameterisation noise never
//! share state and each can be reproduced in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    key: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self {
            key: splitmix(seed),
        }
    }

    /// Child node for a named sub-stream.
    pub fn child(&self, name: &str) -> Self {
        let mut key = self.key;
        for b in name.bytes() {
            key = splitmix(key ^ u64::from(b));
        }
        Self {
            key: splitmix(key ^ 0xA5A5),
        }
    }

    /// Child node for an indexed sub-stream (epoch, scene id, ...).
    pub fn index(&self, i: u64) -> Self {
        Self {
            key: splitmix(self.key ^ splitmix(i.wrapping_add(0x5151))),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Materialise the node as a ChaCha stream.
    pub fn rng(&self) -> Rng {
        let mut seed = [0u8; 32];
        let mut k = self.key;
        for chunk in seed.chunks_mut(8) {
            k = splitmix(k);
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}
