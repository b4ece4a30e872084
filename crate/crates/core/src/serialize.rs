//! Versioned model files.
//!
//! Layout: the 8-byte magic `FRUGALFF`, a little-endian `u16` format
//! version, a little-endian `u64` payload length, the JSON payload, and the
//! SHA-256 digest of the payload. Floats are written in their shortest
//! round-tripping form and parsed exactly, so a load/save cycle reproduces
//! the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frugal::FrugalFlowModel;
use crate::propensity::PropensityFlowModel;

pub const MAGIC: &[u8; 8] = b"FRUGALFF";
pub const FORMAT_VERSION: u16 = 1;
const HEADER: usize = 8 + 2 + 8;
const DIGEST: usize = 32;

/// Everything `fit` produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub frugal: FrugalFlowModel,
    pub propensity: Option<PropensityFlowModel>,
}

pub fn to_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(value).map_err(|e| Error::Corrupt(format!("cannot encode model: {e}")))?;
    let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

pub fn from_bytes<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T> {
    if bytes.len() < HEADER + DIGEST || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("not a frugal model file".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    if bytes.len() != HEADER + len + DIGEST {
        return Err(Error::Corrupt(format!("payload length {len} does not match file size {}", bytes.len())));
    }
    let payload = &bytes[HEADER..HEADER + len];
    if Sha256::digest(payload).as_slice() != &bytes[HEADER + len..] {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    serde_json::from_slice(payload).map_err(|e| Error::Corrupt(format!("cannot decode model: {e}")))
}

pub fn save<T: Serialize>(value: &T, path: &Path) -> Result<Vec<u8>> {
    let bytes = to_bytes(value)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    Ok((from_bytes(&bytes)?, bytes))
}

/// Lower-case hex SHA-256 of a whole file's bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Sample {
        values: Vec<f64>,
        name: String,
    }

    fn sample() -> Sample {
        Sample { values: vec![0.1 + 0.2, 1.0 / 3.0, -2.5e-300, 1e300, f64::MIN_POSITIVE], name: "x".into() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = to_bytes(&sample()).unwrap();
        let back: Sample = from_bytes(&bytes).unwrap();
        for (a, b) in back.values.iter().zip(&sample().values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes[8] = 9;
        assert!(matches!(from_bytes::<Sample>(&bytes), Err(Error::Version { found: 9, expected: 1 })));
        let mut bytes = to_bytes(&sample()).unwrap();
        let k = bytes.len() - 40;
        bytes[k] ^= 1;
        assert!(matches!(from_bytes::<Sample>(&bytes), Err(Error::Corrupt(_))));
        assert!(matches!(from_bytes::<Sample>(b"nope"), Err(Error::Corrupt(_))));
    }
}
