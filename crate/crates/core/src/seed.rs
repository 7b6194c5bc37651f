//! Stable hashing for seed derivation. Results do not depend on platform,
//! process, or corpus order.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines words into one well-mixed 64-bit value.
pub fn combine(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| mix64(h ^ p))
}

/// Per-example stream seed from the global seed and the example id.
pub fn example_seed(global: u64, id: &str) -> u64 {
    combine(&[global, fnv1a(id.as_bytes())])
}

/// Maps a hash to a uniform value in `[-1, 1]`.
pub fn unit_interval(h: u64) -> f64 {
    // top 53 bits -> [0, 1]
    let u = (h >> 11) as f64 / ((1u64 << 53) - 1) as f64;
    2.0 * u - 1.0
}
