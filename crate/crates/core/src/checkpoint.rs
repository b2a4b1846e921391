//! Binary container shared by every on-disk artifact.
//!
//! Layout: 8-byte magic, 8-byte kind tag, u32 format version, u64 payload
//! length, SHA-256 of the payload, bincode payload. All integers little-endian.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"XRAYGAN\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 8 + 4 + 8 + 32;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode<T: Serialize>(kind: &[u8; 8], value: &T) -> Result<Vec<u8>> {
    let payload = bincode::serialize(value).map_err(|e| Error::Internal(format!("serialize: {e}")))?;
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(kind);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(kind: &[u8; 8], bytes: &[u8], path: &Path) -> Result<T> {
    let fail = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(fail("not an xraygan file".into()));
    }
    if &bytes[8..16] != kind {
        return Err(fail(format!(
            "expected a {} file, found {}",
            tag_name(kind),
            tag_name(&bytes[8..16])
        )));
    }
    let version = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[HEADER..];
    if payload.len() != len {
        return Err(fail(format!(
            "truncated: expected {len} payload bytes, found {}",
            payload.len()
        )));
    }
    if Sha256::digest(payload).as_slice() != &bytes[28..60] {
        return Err(fail("checksum mismatch".into()));
    }
    bincode::deserialize(payload).map_err(|e| fail(format!("corrupt payload: {e}")))
}

pub fn save<T: Serialize>(kind: &[u8; 8], value: &T, path: &Path) -> Result<()> {
    write_atomic(path, &encode(kind, value)?)
}

/// Writes through a sibling temp file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(kind: &[u8; 8], path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(kind, &bytes, path)
}

fn tag_name(tag: &[u8]) -> String {
    String::from_utf8_lossy(tag).trim_end_matches('\0').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const KIND: &[u8; 8] = b"TEST\0\0\0\0";

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        save(KIND, &vec![1.5f64, -2.0], &p).unwrap();
        let back: Vec<f64> = load(KIND, &p).unwrap();
        assert_eq!(back, vec![1.5, -2.0]);

        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        let err = decode::<Vec<f64>>(KIND, &bytes, &p).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        let err = decode::<Vec<f64>>(b"OTHER\0\0\0", &fs::read(&p).unwrap(), &p)
            .unwrap_err()
            .to_string();
        assert!(err.contains("expected a OTHER file, found TEST"), "{err}");
        assert!(decode::<Vec<f64>>(KIND, b"garbage", &p).is_err());
    }
}
