//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 keystream addressed by
//! `(seed, stream, substream)`. The seed is expanded into the cipher key, the
//! stream selects the ChaCha nonce, and the substream jumps the block counter
//! to a disjoint window of 2^32 words. A draw therefore depends only on its
//! address, never on how work was scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Width (in 32-bit words) of one substream window.
const SUBSTREAM_SHIFT: u32 = 32;

/// Root seed of a family of random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn new(seed: u64) -> Self {
        RngSeed(seed)
    }

    /// Derives an independent child seed for a named purpose.
    pub fn derive(self, tag: u64) -> RngSeed {
        RngSeed(mix(self.0 ^ mix(tag.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    /// Derives a child seed from a string key (e.g. an experiment row name).
    pub fn derive_str(self, key: &str) -> RngSeed {
        // FNV-1a, then mixed through `derive`.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in key.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.derive(h)
    }

    /// Generator positioned at the start of `(stream, substream)`.
    pub fn stream(self, stream: u64, substream: u64) -> ChaCha8Rng {
        assert!(
            substream < (1u64 << (68 - SUBSTREAM_SHIFT)),
            "substream index out of range"
        );
        let mut key = [0u8; 32];
        let mut state = self.0;
        for chunk in key.chunks_exact_mut(8) {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            chunk.copy_from_slice(&mix(state).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(substream) << SUBSTREAM_SHIFT);
        rng
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

/// Well-known stream tags used by the estimators.
pub mod tags {
    pub const STAGE1_OUTER: u64 = 1;
    pub const STAGE1_INNER: u64 = 2;
    pub const STAGE2_OUTER: u64 = 3;
    pub const TUNING: u64 = 4;
    pub const TRAINING: u64 = 5;
    pub const MODEL_GENERATOR: u64 = 6;
    pub const BRIDGE: u64 = 7;
}

/// SplitMix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw on the open interval (0, 1).
pub(crate) fn open_unit<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}
