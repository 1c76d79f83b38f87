//! Flat little-endian float64 parameter files with a JSON header.
//!
//! Layout: 8-byte magic `CSPARAM1`, u64 LE header length, header JSON,
//! then `count` f64 LE values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSPARAM1";

/// Version of the per-pixel feature layout the classifiers are trained on.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    /// What the values parameterize, e.g. `"mlp"` or `"conv_extractor"`.
    pub kind: String,
    pub dims: Vec<usize>,
    pub seed: u64,
    pub feature_schema_version: u32,
    pub count: usize,
    /// Kind-specific scalars (thresholds and the like).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn write_params(path: &Path, header: &ParamHeader, values: &[f64]) -> Result<()> {
    if header.count != values.len() {
        return Err(Error::Serialization(format!(
            "header declares {} values, got {}",
            header.count,
            values.len()
        )));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + values.len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<(ParamHeader, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Descriptor {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a parameter file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: ParamHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[16 + hlen..];
    if payload.len() != header.count * 8 {
        return Err(bad("payload length disagrees with header count"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        let values = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, -3.25];
        let header = ParamHeader {
            kind: "mlp".into(),
            dims: vec![6, 500, 2],
            seed: 9,
            feature_schema_version: FEATURE_SCHEMA_VERSION,
            count: values.len(),
            extra: Default::default(),
        };
        write_params(&p, &header, &values).unwrap();
        let (h, v) = read_params(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        fs::write(&p, b"hello").unwrap();
        assert!(read_params(&p).is_err());
    }
}
