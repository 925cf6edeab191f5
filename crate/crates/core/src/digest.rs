//! SHA3-256 commitment digests and hex helpers.
//!
//! All commitments (model files, watermark bundles, bulletin chain links)
//! use SHA3-256 over exact byte strings. Nothing here re-serializes: callers
//! hand in the bytes they want committed.

use thiserror::Error;

/// A 32-byte SHA3-256 digest.
pub type Digest32 = [u8; 32];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DigestError {
    #[error("digest must be 64 hex characters, got {0}")]
    BadLength(usize),
    #[error("digest contains non-hex characters")]
    BadHex,
}

pub fn sha3_256(bytes: &[u8]) -> Digest32 {
    use sha3::{Digest, Sha3_256};
    let mut h = Sha3_256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn to_hex(d: &Digest32) -> String {
    hex::encode(d)
}

pub fn from_hex(s: &str) -> Result<Digest32, DigestError> {
    if s.len() != 64 {
        return Err(DigestError::BadLength(s.len()));
    }
    let v = hex::decode(s).map_err(|_| DigestError::BadHex)?;
    let mut d = [0u8; 32];
    d.copy_from_slice(&v);
    Ok(d)
}
