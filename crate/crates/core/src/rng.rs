//! Seeded, splittable random streams.
//!
//! Every stochastic operation takes an explicit generator. Independent
//! sub-streams are derived from a root seed and a stream id, so adding a
//! consumer never perturbs the draws seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type FusionRng = ChaCha8Rng;

/// Generator for `(seed, stream)`. Distinct streams of the same seed are independent.
pub fn stream(seed: u64, stream: u64) -> FusionRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child generator from a parent, consuming one draw of the parent.
pub fn split(parent: &mut FusionRng) -> FusionRng {
    let seed: u64 = parent.random();
    let id: u64 = parent.random();
    stream(seed, id)
}

/// Well-known stream ids so call sites do not collide.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const AUTOENCODER: u64 = 3;
    pub const KMEANS: u64 = 4;
    pub const DISTRIBUTION: u64 = 5;
    pub const MODEL_INIT: u64 = 6;
    pub const TASKS: u64 = 7;
    pub const AUGMENT: u64 = 8;
    pub const META_TEST: u64 = 9;
    pub const CL_TRAIN: u64 = 10;
    pub const ABLATION: u64 = 11;
}
