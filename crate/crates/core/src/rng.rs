//! Seeded random streams.
//!
//! Every consumer of randomness asks for a stream by name; the stream's seed
//! mixes the root seed with a hash of the name, so adding a new consumer
//! never perturbs the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream `name` derived from `root`.
pub fn stream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(splitmix(root ^ splitmix(fnv1a(name))))
}

/// Stream seeded directly with `seed`, for per-run benchmark seeds.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
