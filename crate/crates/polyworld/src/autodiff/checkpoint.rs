//! Checkpoint file format.
//!
//! A single file holding a JSON manifest followed by raw little-endian
//! float64 buffers, so other implementations can load it without this crate:
//!
//! ```text
//! bytes 0..8    magic "PWCKPT01"
//! bytes 8..16   u64 LE: manifest byte length M
//! bytes 16..16+M  manifest JSON (UTF-8):
//!     {
//!       "tensors": [ {"name": str, "shape": [u64...], "dtype": "f64",
//!                     "offset": u64, "len": u64}, ... ],
//!       "meta": { ... arbitrary run metadata ... }
//!     }
//! bytes 16+M..  payload: concatenated f64 LE buffers; each tensor starts
//!               at `offset` *elements* (8 bytes each) into the payload and
//!               spans `len` elements.
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PWCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorRecord>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A named buffer loaded from or destined for a checkpoint.
#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn save(path: &Path, entries: &[Entry], meta: serde_json::Value) -> Result<()> {
    let mut records = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' shape {:?} does not match buffer length {}",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        records.push(TensorRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
            dtype: "f64".into(),
            offset,
            len: e.data.len() as u64,
        });
        offset += e.data.len() as u64;
    }
    let manifest = serde_json::to_vec(&Manifest {
        tensors: records,
        meta,
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for e in entries {
        for &v in &e.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<Entry>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}: not a checkpoint file",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let mlen = u64::from_le_bytes(len8) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)
        .map_err(|e| Error::Checkpoint(format!("manifest parse failed: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        if rec.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has unsupported dtype '{}'",
                rec.name, rec.dtype
            )));
        }
        let start = rec.offset as usize * 8;
        let end = start + rec.len as usize * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' extends past end of file",
                rec.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let numel: usize = rec.shape.iter().product();
        if numel != data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' shape/len mismatch in manifest",
                rec.name
            )));
        }
        entries.push(Entry {
            name: rec.name.clone(),
            shape: rec.shape.clone(),
            data,
        });
    }
    Ok((entries, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_meta() {
        let dir = std::env::temp_dir().join("pw_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pwck");
        let entries = vec![
            Entry {
                name: "w1".into(),
                shape: vec![2, 3],
                data: vec![1.5, -2.25, 0.1, f64::MIN_POSITIVE, 1e300, -0.0],
            },
            Entry {
                name: "b1".into(),
                shape: vec![3],
                data: vec![0.0, 1.0, 2.0],
            },
        ];
        let meta = serde_json::json!({"epoch": 3, "seed": 42});
        save(&path, &entries, meta.clone()).unwrap();
        let (back, meta2) = load(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back.len(), 2);
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = std::env::temp_dir().join("pw_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.pwck");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
