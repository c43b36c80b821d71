//! Parameter checkpoints: one file holding named f64 arrays.
//!
//! ```text
//! b"WSCKPT01"            magic
//! u64 LE                 header length in bytes
//! header                 JSON {"arrays": [{name, module, shape, dtype, offset}]}
//! data                   little-endian f64 values; offsets count from here
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"WSCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub module: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayEntry>,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut arrays = Vec::with_capacity(store.len());
    let mut data = Vec::new();
    for id in store.ids() {
        let t = store.get(id);
        arrays.push(ArrayEntry {
            name: store.name(id).to_string(),
            module: store.module_of(id).to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: data.len() as u64,
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { arrays }).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}

/// Decodes every array, in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(ArrayEntry, Tensor)>> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
    if hlen > body.len() {
        return Err(bad("header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let data = &body[hlen..];
    let mut out = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start.checked_add(n * 8).filter(|&e| e <= data.len()).ok_or_else(|| Error::Checkpoint(format!("{}: data out of range", entry.name)))?;
        let values = data[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::from_vec(&entry.shape, values)?;
        out.push((entry, t));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(ArrayEntry, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Overwrites every parameter of `store` from `arrays`. Names and shapes
/// must match exactly in both directions.
pub fn restore(store: &mut ParamStore, arrays: Vec<(ArrayEntry, Tensor)>) -> Result<()> {
    if arrays.len() != store.len() {
        return Err(Error::Mismatch(format!("checkpoint has {} arrays, model has {}", arrays.len(), store.len())));
    }
    for (entry, t) in arrays {
        let id = store.find(&entry.name).ok_or_else(|| Error::Mismatch(format!("model has no parameter {}", entry.name)))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Mismatch(format!("{}: checkpoint shape {:?}, model {:?}", entry.name, t.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("backbone.conv1.w", Tensor::from_vec(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.5, 0.1 + 0.2]).unwrap());
        s.add("mil.cls1.b", Tensor::from_vec(&[1], vec![f64::EPSILON]).unwrap());
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = store();
        let arrays = decode(&encode(&s)).unwrap();
        assert_eq!(arrays[0].0.module, "backbone");
        assert_eq!(arrays[1].0.offset, 48);
        let mut t = store();
        for id in t.ids().collect::<Vec<_>>() {
            *t.get_mut(id) = t.get(id).map(|_| 7.0);
        }
        restore(&mut t, arrays).unwrap();
        for id in s.ids() {
            let a: Vec<u64> = s.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t.get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let bytes = encode(&store());
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(b"nope"), Err(Error::Checkpoint(_))));
        let mut other = ParamStore::new();
        other.add("backbone.conv1.w", Tensor::zeros(&[3, 2]));
        other.add("mil.cls1.b", Tensor::zeros(&[1]));
        assert!(matches!(restore(&mut other, decode(&bytes).unwrap()), Err(Error::Mismatch(_))));
    }
}
