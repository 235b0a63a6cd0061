//! Canonical JSON: UTF-8, object keys sorted lexicographically, no insignificant
//! whitespace. Used for the wire, the event log and state hashing.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{MemError, Result};

pub fn to_value<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| MemError::StorageFailure(e.to_string()))
}

/// Serializes through `serde_json::Value`, whose maps are ordered by key.
pub fn to_string<T: Serialize>(value: &T) -> Result<String> {
    Ok(to_value(value)?.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
