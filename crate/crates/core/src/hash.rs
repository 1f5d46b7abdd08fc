//! Content hashing for cache keys and fingerprints.

use alloc::string::String;
use sha2::{Digest, Sha256};

/// Incremental SHA-256 over length-framed fields, so that no two distinct
/// field sequences hash the same byte stream.
#[derive(Clone, Default)]
pub struct FramedHasher {
    inner: Sha256,
}

impl FramedHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(mut self, bytes: &[u8]) -> Self {
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
        self
    }

    pub fn finish_hex(self) -> String {
        hex::encode(self.inner.finalize())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// 64-bit FNV-1a, used for feature hashing where a cryptographic digest per
/// n-gram would be wasted work.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_separates_fields() {
        let a = FramedHasher::new().field(b"ab").field(b"c").finish_hex();
        let b = FramedHasher::new().field(b"a").field(b"bc").finish_hex();
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
