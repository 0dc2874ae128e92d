//! Header-plus-payload container files and little-endian tensor encoding.
//!
//! Layout: 4-byte magic `EGRC`, `u32` LE format version, `u64` LE header
//! length, UTF-8 JSON header, then the raw payload. Tensor payloads are packed
//! little-endian floats in row-major order.

use std::fs;
use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

const MAGIC: &[u8; 4] = b"EGRC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a container file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported container version {version}")]
    Version { path: String, version: u32 },
    #[error("{path}: truncated container")]
    Truncated { path: String },
    #[error("{path}: invalid header: {source}")]
    Header {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("payload length {len} is not a multiple of {width}")]
    PayloadAlignment { len: usize, width: usize },
}

pub fn encode<H: Serialize>(header: &H, payload: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("container headers are plain data");
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    out
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8], path: &str) -> Result<(H, Vec<u8>), ContainerError> {
    if bytes.len() < 16 {
        return Err(ContainerError::Truncated { path: path.into() });
    }
    if &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic { path: path.into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ContainerError::Version { path: path.into(), version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ContainerError::Truncated { path: path.into() })?;
    let header = serde_json::from_slice(&bytes[16..end]).map_err(|source| ContainerError::Header {
        path: path.into(),
        source,
    })?;
    Ok((header, bytes[end..].to_vec()))
}

pub fn write<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<Vec<u8>, ContainerError> {
    let bytes = encode(header, payload);
    fs::write(path, &bytes).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(bytes)
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>), ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes, &path.display().to_string())
}

pub fn f32_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le(bytes: &[u8]) -> Result<Vec<f32>, ContainerError> {
    if bytes.len() % 4 != 0 {
        return Err(ContainerError::PayloadAlignment { len: bytes.len(), width: 4 });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn f64_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_le(bytes: &[u8]) -> Result<Vec<f64>, ContainerError> {
    if bytes.len() % 8 != 0 {
        return Err(ContainerError::PayloadAlignment { len: bytes.len(), width: 8 });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Hex SHA-256 of a byte string, used for content addressing.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
