//! Seed derivation for schedule-independent random streams.
//!
//! Every consumer (a trajectory, a tree, a replication) gets its own ChaCha
//! stream keyed by `(master seed, domain)` and selected by a 64-bit stream
//! index, so results do not depend on which worker runs which item.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DOMAIN_TRAJECTORY: u64 = 0x7472_616a;
pub const DOMAIN_TREE: u64 = 0x7472_6565;
pub const DOMAIN_TIMESTEP: u64 = 0x7469_6d65;
pub const DOMAIN_REPLICATION: u64 = 0x7265_706c;
pub const DOMAIN_SHUFFLE: u64 = 0x7368_7566;
pub const DOMAIN_SAMPLE: u64 = 0x7361_6d70;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a label into a child seed.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ label.rotate_left(17))
}

/// Independent generator for item `index` of `domain` under `seed`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain));
    rng.set_stream(index);
    rng
}
