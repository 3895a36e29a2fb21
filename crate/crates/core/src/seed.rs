//! Seed derivation. Every random stream in a run is a pure function of the
//! master seed and a small tag, so independent stages never share state.

/// SplitMix64 finalizer applied to `seed ^ tag`.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = (seed ^ tag.rotate_left(17)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Tags for the top-level streams derived from a master seed.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const VAE_INIT: u64 = 2;
    pub const VAE_TRAIN: u64 = 3;
    pub const UNET_INIT: u64 = 4;
    pub const UNET_TRAIN: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const FEATURES: u64 = 7;
    pub const CLASSIFIER: u64 = 8;
    pub const DIVERSITY: u64 = 9;
    pub const EVAL: u64 = 10;
}
