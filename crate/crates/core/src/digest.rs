//! SHA-256 helpers used for image identity, request keys and cache integrity.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of the canonical JSON form of `value`. Object keys are emitted in
/// sorted order, so field declaration order does not matter.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("serializable value");
    sha256_hex(canonical.to_string())
}
