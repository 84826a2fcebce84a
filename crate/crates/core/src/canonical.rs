//! Canonical JSON and digests.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Pretty JSON with lexicographically sorted object keys and a trailing
/// newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    let mut s = serde_json::to_string_pretty(&v).expect("json value");
    s.push('\n');
    s
}

/// Compact sorted-key JSON, used for hashing and JSON lines.
pub fn to_compact_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string(&v).expect("json value")
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(sha256(bytes))
}

/// SHA-256 over the concatenation of `parts`.
pub fn sha256_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Deterministic filler of `len` bytes derived from `seed`: a SHA-256
/// counter stream.
pub fn filler(seed: &str, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 32);
    let mut counter: u64 = 0;
    while out.len() < len {
        out.extend_from_slice(&sha256_parts(&[seed.as_bytes(), &counter.to_le_bytes()]));
        counter += 1;
    }
    out.truncate(len);
    out
}

/// Like [`filler`] but restricted to lowercase hex characters, so it can be
/// carried in a JSON text field.
pub fn text_filler(seed: &str, len: usize) -> String {
    let bytes = filler(seed, len.div_ceil(2));
    let mut s = hex::encode(bytes);
    s.truncate(len);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_keys() {
        let v = serde_json::json!({"b": 1, "a": {"d": 2, "c": 3}});
        assert_eq!(to_compact_json(&v), r#"{"a":{"c":3,"d":2},"b":1}"#);
    }

    #[test]
    fn filler_is_stable() {
        assert_eq!(filler("x", 70).len(), 70);
        assert_eq!(filler("x", 70), filler("x", 70));
        assert_ne!(filler("x", 70), filler("y", 70));
        assert_eq!(text_filler("x", 5).len(), 5);
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
