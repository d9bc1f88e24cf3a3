//! Counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha stream addressed by
//! `(seed, domain, index)`, so draws never depend on the order in which
//! work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const INIT_ROWS: u64 = 1;
pub(crate) const INIT_SIGNS: u64 = 2;
pub(crate) const DATA: u64 = 3;
pub(crate) const BATCH: u64 = 4;
pub(crate) const MONTE_CARLO: u64 = 5;
pub(crate) const ENSEMBLE: u64 = 6;
pub(crate) const SUBSAMPLE: u64 = 7;
pub(crate) const PROBE: u64 = 8;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(domain)));
    rng.set_stream(index);
    rng
}

/// Block size used when a long sequence of draws is split into streams.
pub(crate) const BLOCK: usize = 1024;
