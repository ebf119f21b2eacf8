//! Deterministic named random streams.
//!
//! Every run derives all of its randomness from a single master seed through
//! counter-based ChaCha streams addressed by (name, index). Fixing a name
//! fixes that stream regardless of how other streams are consumed, which is
//! what lets finite-difference checks hold trajectories fixed while varying
//! parameters, and lets method comparisons share environment noise for paired
//! runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::gradcheck::fnv1a;

/// Factory for named, indexed random streams under one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    master_seed: u64,
}

impl Streams {
    pub fn new(master_seed: u64) -> Self {
        Streams { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// The stream addressed by (name, index). Same inputs, same stream.
    pub fn stream(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(fnv1a(name.as_bytes()).wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15)));
        rng
    }

    /// A derived factory whose streams are disjoint from the parent's.
    pub fn child(&self, name: &str, index: u64) -> Streams {
        Streams {
            master_seed: self
                .master_seed
                .wrapping_mul(0x100000001B3)
                .wrapping_add(fnv1a(name.as_bytes()))
                .wrapping_add(index),
        }
    }
}

/// Stream names used across the crate, kept in one place so paired runs agree
/// on which stream carries which randomness.
pub mod names {
    /// Environment transitions and reward noise.
    pub const ENV: &str = "env";
    /// Action sampling from the behavior policy.
    pub const ACT: &str = "act";
    /// Parameter initialization.
    pub const INIT: &str = "init";
}
