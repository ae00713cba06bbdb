//! Seeded random streams keyed by `(seed, purpose, epoch, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type CoreRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, purpose, epoch, index)` key. The
/// same key always yields the same stream.
pub fn keyed(seed: u64, purpose: u64, epoch: u64, index: u64) -> CoreRng {
    let mut bytes = [0u8; 32];
    let mut state = splitmix(seed);
    for (i, part) in [purpose, epoch, index, 0x6b67_7365_71].into_iter().enumerate() {
        state = splitmix(state ^ part);
        bytes[i * 8..(i + 1) * 8].copy_from_slice(&state.to_le_bytes());
    }
    CoreRng::from_seed(bytes)
}

pub fn seeded(seed: u64) -> CoreRng {
    CoreRng::seed_from_u64(seed)
}

/// Purpose tags for [`keyed`].
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const DROPOUT_MASK: u64 = 2;
    pub const HISTORY_MASK: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const FUSION_INIT: u64 = 6;
    pub const GRADCHECK: u64 = 7;
}
