//! Stable seed derivation. Everything random in the crate is a pure function of
//! a root seed and a path of integers mixed through SplitMix64 finalizers.

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with one more path component.
pub fn mix(seed: u64, component: u64) -> u64 {
    splitmix64(seed ^ splitmix64(component.wrapping_add(0xA076_1D64_78BD_642F)))
}

pub const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;

/// FNV-1a over `bytes`, continuing from `state` (start with [`FNV_OFFSET`]).
pub fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes.iter().fold(state, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3))
}

/// Hash of a string label, stable across platforms and runs.
pub fn label_hash(label: &str) -> u64 {
    fnv1a(FNV_OFFSET, label.as_bytes())
}
