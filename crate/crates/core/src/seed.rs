//! Deterministic seed derivation for independent random streams.

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `base`, giving a stream seed that differs for every tuple.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Stream tags used by the pipeline.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const LSH: u64 = 4;
    pub const TASK: u64 = 5;
    pub const ATTACK: u64 = 6;
    pub const PRETRAIN: u64 = 7;
}
