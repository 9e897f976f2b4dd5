//! Named-tensor container: `u64` little-endian header length, a JSON header
//! mapping each name to `{shape, dtype: "f64", offset}`, then the raw
//! little-endian payload. Offsets are in bytes from the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

pub fn encode(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in tensors {
        header.insert(
            name.clone(),
            Entry {
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
            },
        );
        offset += t.numel() * 8;
    }
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let corrupt = |reason: String| Error::CorruptHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(corrupt("missing header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if hlen > bytes.len() - 8 {
        return Err(corrupt(format!("header length {hlen} exceeds file size")));
    }
    let header: BTreeMap<String, Entry> =
        serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| corrupt(e.to_string()))?;
    let payload = &bytes[8 + hlen..];
    let mut out = BTreeMap::new();
    for (name, e) in header {
        if e.dtype != "f64" {
            return Err(corrupt(format!(
                "tensor `{name}` has unsupported dtype {}",
                e.dtype
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > payload.len() {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: end,
                found: payload.len(),
            });
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.insert(
            name,
            Tensor::new(e.shape, data).map_err(|err| corrupt(err.to_string()))?,
        );
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode(&fs::read(path)?, path)
}
