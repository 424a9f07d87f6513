//! Reproducible random streams.
//!
//! Every stochastic step draws from a ChaCha stream keyed by the run seed and
//! a path of indices (split, sample, iteration, ...). Streams for different
//! paths are independent, so work can be reordered or parallelised without
//! changing any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `seed` on the substream identified by `path`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let id = path
        .iter()
        .fold(0x5eed_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
