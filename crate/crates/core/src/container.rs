//! On-disk array container: a directory holding `index.json` and
//! `weights.bin`.
//!
//! The index lists every array (path, shape, byte offset, per-array SHA-256);
//! the weights file is the little-endian f32 concatenation in index order.
//! Loading verifies every checksum, so a tampered or truncated file fails
//! loudly instead of misreading.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    path: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Index {
    version: u32,
    stage: String,
    meta: BTreeMap<String, serde_json::Value>,
    params: Vec<IndexEntry>,
}

/// An in-memory container: a stage tag, free-form metadata and named arrays.
#[derive(Debug, Clone, Default)]
pub struct Container {
    pub stage: String,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub arrays: BTreeMap<String, ArrayD<f32>>,
}

impl Container {
    pub fn new(stage: &str) -> Self {
        Container {
            stage: stage.to_string(),
            ..Default::default()
        }
    }

    pub fn meta_str(&self, key: &str) -> Result<String> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::CorruptIndex(format!("missing meta key {key}")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::CorruptIndex(format!("missing meta key {key}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut blob = Vec::new();
        for (path, arr) in &self.arrays {
            let offset = blob.len() as u64;
            let mut hasher = Sha256::new();
            for v in arr.iter() {
                let b = v.to_le_bytes();
                hasher.update(b);
                blob.extend_from_slice(&b);
            }
            entries.push(IndexEntry {
                path: path.clone(),
                shape: arr.shape().to_vec(),
                dtype: "f32".to_string(),
                offset,
                len: arr.len() as u64,
                sha256: hex(&hasher.finalize()),
            });
        }
        let index = Index {
            version: SCHEMA_VERSION,
            stage: self.stage.clone(),
            meta: self.meta.clone(),
            params: entries,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("index.json"))?);
        serde_json::to_writer_pretty(&mut f, &index)?;
        writeln!(f)?;
        std::fs::write(dir.join("weights.bin"), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        if !index_path.exists() {
            return Err(Error::MissingFile(index_path.display().to_string()));
        }
        let index: Index = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(
            &index_path,
        )?))?;
        if index.version != SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                expected: SCHEMA_VERSION,
                found: index.version,
            });
        }
        let mut blob = Vec::new();
        std::fs::File::open(dir.join("weights.bin"))?.read_to_end(&mut blob)?;
        let mut arrays = BTreeMap::new();
        for e in &index.params {
            if e.dtype != "f32" {
                return Err(Error::CorruptIndex(format!("unsupported dtype {}", e.dtype)));
            }
            let n = e.len as usize;
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > blob.len() {
                return Err(Error::CorruptIndex(format!(
                    "entry {} extends past end of weights.bin",
                    e.path
                )));
            }
            let bytes = &blob[start..end];
            let mut hasher = Sha256::new();
            hasher.update(bytes);
            if hex(&hasher.finalize()) != e.sha256 {
                return Err(Error::CorruptIndex(format!("checksum mismatch for {}", e.path)));
            }
            let expected: usize = e.shape.iter().product();
            if expected != n {
                return Err(Error::CorruptIndex(format!("shape/len mismatch for {}", e.path)));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values)
                .map_err(|e2| Error::CorruptIndex(e2.to_string()))?;
            arrays.insert(e.path.clone(), arr);
        }
        Ok(Container {
            stage: index.stage,
            meta: index.meta,
            arrays,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("pretrain");
        c.meta.insert("note".into(), serde_json::json!("x"));
        c.arrays.insert(
            "a/w".into(),
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        c.arrays
            .insert("b".into(), ArrayD::from_elem(IxDyn(&[3]), 0.5));
        c
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        c.save(dir.path()).unwrap();
        let idx1 = std::fs::read(dir.path().join("index.json")).unwrap();
        let bin1 = std::fs::read(dir.path().join("weights.bin")).unwrap();
        let loaded = Container::load(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        loaded.save(dir2.path()).unwrap();
        assert_eq!(idx1, std::fs::read(dir2.path().join("index.json")).unwrap());
        assert_eq!(bin1, std::fs::read(dir2.path().join("weights.bin")).unwrap());
        assert_eq!(loaded.arrays, c.arrays);
    }

    #[test]
    fn tampered_weights_fail() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let mut bin = std::fs::read(dir.path().join("weights.bin")).unwrap();
        bin[0] ^= 0xff;
        std::fs::write(dir.path().join("weights.bin"), bin).unwrap();
        assert!(matches!(Container::load(dir.path()), Err(Error::CorruptIndex(_))));
    }

    #[test]
    fn version_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let idx = std::fs::read_to_string(dir.path().join("index.json")).unwrap();
        std::fs::write(
            dir.path().join("index.json"),
            idx.replace("\"version\": 1", "\"version\": 99"),
        )
        .unwrap();
        assert!(matches!(
            Container::load(dir.path()),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
