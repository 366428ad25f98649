/// FNV-1a 64-bit hash; used for name-derived seeds and checkpoint integrity.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic per-parameter seed: identical names get identical streams
/// under the same root seed, independent of construction order.
pub fn seed_for(name: &str, root_seed: u64) -> u64 {
    fnv1a64(name.as_bytes()) ^ root_seed
}
