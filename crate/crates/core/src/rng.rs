//! Seedable random streams.
//!
//! The allocator's stream and the adversary's stream are separate
//! instances; nothing an adversary does can reach the allocator's state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Randomness source for every diversification decision of the MAD layer.
#[derive(Debug, Clone)]
pub struct DiversityRng {
    seed: u64,
    inner: ChaCha12Rng,
}

impl DiversityRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform index in `0..n`. `n` must be non-zero.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform value in `lo..=hi`.
    #[inline]
    pub fn between(&mut self, lo: u32, hi: u32) -> u32 {
        self.inner.gen_range(lo..=hi)
    }

    /// Independent child stream, e.g. for the snapshot monitor.
    pub fn fork(&mut self) -> DiversityRng {
        DiversityRng::new(self.inner.next_u64())
    }
}

/// SplitMix64 finaliser, used to derive unrelated seeds from one base seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
