//! Independent random streams derived from the run seed.

pub const STREAM_ORDER: u64 = 1;
pub const STREAM_MASK: u64 = 2;
pub const STREAM_MODEL: u64 = 3;
pub const STREAM_PROBE: u64 = 4;
pub const STREAM_FINETUNE_MASK: u64 = 5;
pub const STREAM_FINETUNE_MODEL: u64 = 6;
pub const STREAM_FINETUNE_ORDER: u64 = 7;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for stream `stream` at coordinates `(a, b)`, e.g. (step, sample).
pub fn derive_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(seed) ^ stream) ^ a) ^ b)
}
