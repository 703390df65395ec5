//! Deterministic stream derivation.
//!
//! Every random draw site owns a ChaCha stream keyed by (seed, tags...), so
//! results are a pure function of the configured seeds and independent of
//! thread scheduling or evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used as the seed mixer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a tag sequence into a derived seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ t))
}

/// A fresh deterministic stream for (seed, tags...).
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Purpose tags for derived streams. Values are arbitrary but frozen: any
/// change silently reseeds every experiment.
pub mod tag {
    pub const MODEL_INIT: u64 = 0x01;
    pub const DATA_SHUFFLE: u64 = 0x02;
    pub const MASK_T2I: u64 = 0x10;
    pub const MASK_I2T: u64 = 0x11;
    pub const DROP_SELECT: u64 = 0x12;
    pub const DROPOUT: u64 = 0x13;
    pub const CYCLE_SYNTH: u64 = 0x20;
    pub const CYCLE_MASK_A: u64 = 0x21;
    pub const CYCLE_MASK_B: u64 = 0x22;
    pub const CYCLE_GUMBEL: u64 = 0x23;
    pub const SAMPLER: u64 = 0x30;
    pub const SCENE: u64 = 0x40;
    pub const CORRUPT: u64 = 0x41;
    pub const EVAL: u64 = 0x50;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = stream(7, &[tag::MASK_T2I, 3]);
        let mut b = stream(7, &[tag::MASK_T2I, 3]);
        let mut c = stream(7, &[tag::MASK_T2I, 4]);
        let xa: u64 = a.gen();
        let xb: u64 = b.gen();
        let xc: u64 = c.gen();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }
}
