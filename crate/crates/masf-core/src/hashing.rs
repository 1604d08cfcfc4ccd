//! Stable content hashing for cache keys and manifests.
//!
//! `std::hash` offers no stability guarantee across releases, so artifact
//! keys use FNV-1a directly. Collisions are irrelevant at sweep scale and
//! the keys are not security-sensitive.

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of any serializable value via its canonical JSON encoding.
/// Struct field order is fixed at compile time, so the encoding is stable
/// for a given build of this crate.
pub fn hash_value<T: serde::Serialize>(value: &T) -> u64 {
    let text = serde_json::to_string(value).expect("hashable values serialize infallibly");
    fnv1a64(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_vectors() {
        // standard FNV-1a test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn hash_value_distinguishes_configs() {
        let a = hash_value(&("lorenz63", 0.01));
        let b = hash_value(&("lorenz63", 0.02));
        assert_ne!(a, b);
        assert_eq!(a, hash_value(&("lorenz63", 0.01)));
    }
}
