//! `PCPT` binary container shared by model and probe checkpoints.
//!
//! Layout: magic `PCPT`, format version (u16 LE), header length (u32 LE),
//! JSON header, payload of little-endian `f64`, trailing CRC32 of every
//! preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PCPT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a PCPT file")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads {FORMAT_VERSION})")]
    Version { found: u16 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("expected a {expected} container, found {found}")]
    Kind { expected: String, found: String },
}

/// Common header envelope; `body` carries the kind-specific fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope {
    pub kind: String,
    pub payload_len: usize,
    pub body: serde_json::Value,
}

pub fn encode(kind: &str, body: serde_json::Value, payload: &[f64]) -> Vec<u8> {
    let header = serde_json::to_vec(&Envelope { kind: kind.to_string(), payload_len: payload.len(), body }).expect("header serialises");
    let mut out = Vec::with_capacity(4 + 2 + 4 + header.len() + payload.len() * 8 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8], expected_kind: &str) -> Result<(serde_json::Value, Vec<f64>), ContainerError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(ContainerError::Truncated("missing version or header length".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(ContainerError::Version { found: version });
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header_end = 10 + header_len;
    if bytes.len() < header_end + 4 {
        return Err(ContainerError::Truncated(format!("header needs {header_len} bytes")));
    }
    let envelope: Envelope = serde_json::from_slice(&bytes[10..header_end]).map_err(|e| ContainerError::Header(e.to_string()))?;
    let payload_end = header_end + envelope.payload_len * 8;
    if bytes.len() < payload_end + 4 {
        return Err(ContainerError::Truncated(format!(
            "payload declares {} values, file holds {} bytes",
            envelope.payload_len,
            bytes.len()
        )));
    }
    if bytes.len() > payload_end + 4 {
        return Err(ContainerError::Header("trailing bytes after checksum".into()));
    }
    let stored = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(ContainerError::Checksum { stored, computed });
    }
    if envelope.kind != expected_kind {
        return Err(ContainerError::Kind { expected: expected_kind.to_string(), found: envelope.kind });
    }
    let payload = bytes[header_end..payload_end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((envelope.body, payload))
}

pub fn write_file(path: &Path, kind: &str, body: serde_json::Value, payload: &[f64]) -> Result<(), ContainerError> {
    let bytes = encode(kind, body, payload);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path, expected_kind: &str) -> Result<(serde_json::Value, Vec<f64>), ContainerError> {
    decode(&fs::read(path)?, expected_kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_kind_check() {
        let bytes = encode("probe", serde_json::json!({"a": 1}), &[1.5, -2.0]);
        let (body, payload) = decode(&bytes, "probe").unwrap();
        assert_eq!(body["a"], 1);
        assert_eq!(payload, vec![1.5, -2.0]);
        assert!(matches!(decode(&bytes, "model"), Err(ContainerError::Kind { .. })));
    }

    #[test]
    fn distinct_failures() {
        let bytes = encode("model", serde_json::json!({}), &[1.0, 2.0, 3.0]);
        assert!(matches!(decode(b"NOPE", "model"), Err(ContainerError::BadMagic)));
        assert!(matches!(decode(&bytes[..bytes.len() - 9], "model"), Err(ContainerError::Truncated(_))));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 0x01;
        assert!(matches!(decode(&flipped, "model"), Err(ContainerError::Checksum { .. })));
        let mut future = bytes;
        future[4] = 2;
        assert!(matches!(decode(&future, "model"), Err(ContainerError::Version { found: 2 })));
    }
}
