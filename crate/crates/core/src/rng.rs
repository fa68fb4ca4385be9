//! Seeded random streams.
//!
//! Every stochastic routine takes either an explicit generator or a `u64`
//! seed. Replicates derive their seeds from a base seed and an index through
//! ChaCha stream selection, so replicate `i` is independent of how many
//! replicates run or in which order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Vector;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator on stream `stream` of the base seed.
pub fn stream(base: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng
}

/// Seed for replicate `index` under `base`.
pub fn replicate_seed(base: u64, index: u64) -> u64 {
    stream(base, index).next_u64()
}

pub fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    Vector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}
