//! Seeded, stream-splittable random number generation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream derived from
//! the run seed plus a tag path (for example `[sample_id, epoch]` for
//! augmentation). Derived streams make results independent of worker count
//! and iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Crate-wide stream tags; the first tag element namespaces each consumer
/// so no two call sites can collide on the same derived stream.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const CAP: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root stream for a run seed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    derive(seed, &[])
}

/// Independent stream for a tag path under a run seed. Different paths
/// give statistically independent streams; the same path always gives the
/// same stream.
pub fn derive(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ 0xD6E8_FEB8_6659_FD93);
    for &tag in tags {
        state = mix(
            state
                .wrapping_add(tag)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
    }
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        state = mix(state.wrapping_add(0x9E37_79B9_7F4A_7C15));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
