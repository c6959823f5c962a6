//! Canonical JSON encoding: sorted keys, shortest round-trip floats, one
//! record per line in dataset files.

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::model::Validate;
use crate::CoreError;

/// Encodes a record canonically after checking its invariants.
pub fn serialize<T: Serialize + Validate>(record: &T) -> Result<Vec<u8>, CoreError> {
    let violations = record.violations();
    if !violations.is_empty() {
        return Err(CoreError::InvariantViolation(violations));
    }
    to_canonical_bytes(record)
}

/// Canonical encoding without invariant checks.
pub fn to_canonical_bytes<T: Serialize>(record: &T) -> Result<Vec<u8>, CoreError> {
    // `Value` objects are BTreeMap-backed, so keys come out sorted.
    let value = serde_json::to_value(record)?;
    Ok(serde_json::to_vec(&value)?)
}

pub fn to_canonical_string<T: Serialize>(record: &T) -> Result<String, CoreError> {
    let bytes = to_canonical_bytes(record)?;
    Ok(String::from_utf8(bytes).expect("serde_json emits UTF-8"))
}

pub fn deserialize<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CoreError> {
    Ok(serde_json::from_slice(bytes)?)
}

/// Returns all invariant violations of a record.
pub fn validate<T: Validate>(record: &T) -> Vec<String> {
    record.violations()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a record's canonical encoding.
pub fn digest<T: Serialize>(record: &T) -> Result<String, CoreError> {
    Ok(sha256_hex(&to_canonical_bytes(record)?))
}

/// Encodes records as newline-delimited canonical JSON.
pub fn to_ndjson<T: Serialize>(records: &[T]) -> Result<Vec<u8>, CoreError> {
    let mut out = Vec::new();
    for r in records {
        out.extend(to_canonical_bytes(r)?);
        out.push(b'\n');
    }
    Ok(out)
}

/// Parses newline-delimited JSON, skipping blank lines.
pub fn from_ndjson<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, CoreError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Finds the first balanced JSON value opening with `open` in free text
/// and parses it. String literals are respected when matching brackets.
pub fn extract_json(text: &str, open: char) -> Option<serde_json::Value> {
    let close = match open {
        '{' => '}',
        '[' => ']',
        _ => return None,
    };
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(open) {
        let start = search_from + rel;
        if let Some(end) = balanced_end(&text[start..], open, close) {
            if let Ok(v) = serde_json::from_str(&text[start..start + end]) {
                return Some(v);
            }
        }
        search_from = start + open.len_utf8();
    }
    None
}

/// Every non-overlapping balanced JSON value opening with `open`, in order.
pub fn extract_json_all(text: &str, open: char) -> Vec<serde_json::Value> {
    let close = match open {
        '{' => '}',
        '[' => ']',
        _ => return Vec::new(),
    };
    let mut out = Vec::new();
    let mut search_from = 0;
    while let Some(rel) = text[search_from..].find(open) {
        let start = search_from + rel;
        match balanced_end(&text[start..], open, close) {
            Some(end) => match serde_json::from_str(&text[start..start + end]) {
                Ok(v) => {
                    out.push(v);
                    search_from = start + end;
                }
                Err(_) => search_from = start + open.len_utf8(),
            },
            None => break,
        }
    }
    out
}

fn balanced_end(s: &str, open: char, close: char) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            c if c == open => depth += 1,
            c if c == close => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + c.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}
