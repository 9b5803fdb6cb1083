//! Content hashes for configs and artifacts.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the value's JSON with object keys sorted, so the hash does not
/// depend on field order.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    // serde_json's default map is ordered by key.
    let v = serde_json::to_value(value).expect("config values serialize");
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

pub fn bytes_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(bytes_sha256(&std::fs::read(path)?))
}
