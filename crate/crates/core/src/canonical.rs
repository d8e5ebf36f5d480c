//! Canonical JSON encoding.
//!
//! Every signed or hashed record in the system goes through this encoder:
//! UTF-8 JSON, object keys sorted bytewise, no insignificant whitespace,
//! integers in minimal decimal form. Optional fields are omitted by the
//! record types themselves (`skip_serializing_if`).

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::hash::Hash;

#[derive(Debug, thiserror::Error)]
pub enum CanonicalError {
    #[error("record is not serializable: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Canonical bytes of any serializable record.
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    let value = serde_json::to_value(value)?;
    Ok(encode_value(&value))
}

/// Canonical bytes of a record with one top-level key removed. Used to get
/// the signing input of a record that carries its own `signature`.
pub fn to_canonical_bytes_without<T: Serialize + ?Sized>(
    value: &T,
    key: &str,
) -> Result<Vec<u8>, CanonicalError> {
    let mut value = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut value {
        map.remove(key);
    }
    Ok(encode_value(&value))
}

/// SHA-256 over the canonical bytes of `value`.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> Result<Hash, CanonicalError> {
    Ok(Hash::of(&to_canonical_bytes(value)?))
}

/// Canonical encoding of an already-parsed JSON value.
pub fn encode_value(value: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(256);
    write_value(&mut out, value);
    out
}

/// Re-encode arbitrary JSON text canonically.
pub fn canonicalize_json(text: &[u8]) -> Result<Vec<u8>, CanonicalError> {
    let value: Value = serde_json::from_slice(text)?;
    Ok(encode_value(&value))
}

fn write_value(out: &mut Vec<u8>, value: &Value) {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        // serde_json prints integers minimally and floats via ryu; `-0` parses as a float
        Value::Number(n) if n.is_f64() && n.as_f64().is_some_and(|f| f == 0.0 && f.is_sign_negative()) => {
            out.push(b'0')
        }
        Value::Number(n) => out.extend_from_slice(n.to_string().as_bytes()),
        Value::String(s) => write_string(out, s),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(out, item);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            // sort explicitly: serde_json's map ordering depends on crate features
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(out, k);
                out.push(b':');
                write_value(out, v);
            }
            out.push(b'}');
        }
    }
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    // serde_json's string escaper is already minimal and deterministic
    let encoded = serde_json::to_string(s).expect("string encoding cannot fail");
    out.extend_from_slice(encoded.as_bytes());
}

pub(crate) fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}
