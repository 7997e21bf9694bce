//! Canonical JSON: sorted object keys, no insignificant whitespace, shortest
//! round-trip float formatting. Shared by policy documents, scenarios,
//! ledger payloads and run reports so that hashes are stable.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serialize `value` to canonical JSON bytes.
pub fn to_vec<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<Vec<u8>> {
    // `serde_json::Value` objects are backed by a BTreeMap, so routing through
    // it sorts every nested key.
    let v = serde_json::to_value(value)?;
    serde_json::to_vec(&v)
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let bytes = to_vec(value)?;
    Ok(String::from_utf8(bytes).expect("serde_json emits utf-8"))
}

/// Lowercase hex SHA-256 of the canonical encoding.
pub fn hash_hex<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    Ok(hex::encode(Sha256::digest(to_vec(value)?)))
}
