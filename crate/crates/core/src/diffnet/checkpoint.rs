//! Checkpoint files: one JSON manifest line followed by the raw arrays as
//! little-endian `f64`, concatenated in manifest order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: serde_json::Value,
    pub names: Vec<String>,
    pub shapes: Vec<[usize; 2]>,
    pub seed: u64,
    pub version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: serde_json::Value,
    pub seed: u64,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(spec: serde_json::Value, seed: u64) -> Self {
        Self { spec, seed, arrays: Vec::new() }
    }

    /// Appends every array of `store`, names prefixed by `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.arrays.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn push_tensors(&mut self, prefix: &str, names: &[String], tensors: &[Tensor]) {
        for (name, t) in names.iter().zip(tensors) {
            self.arrays.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `store` from arrays named `prefix + name`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let key = format!("{prefix}{name}");
            let t = self.get(&key).ok_or_else(|| Error::Config(format!("checkpoint lacks array {key}")))?;
            let slot = &mut store.tensors_mut()[i];
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "array {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Reads tensors for `names` (prefixed) into fresh tensors.
    pub fn tensors(&self, prefix: &str, names: &[String]) -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| {
                let key = format!("{prefix}{n}");
                self.get(&key).cloned().ok_or_else(|| Error::Config(format!("checkpoint lacks array {key}")))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            spec: self.spec.clone(),
            names: self.arrays.iter().map(|(n, _)| n.clone()).collect(),
            shapes: self.arrays.iter().map(|(_, t)| [t.rows(), t.cols()]).collect(),
            seed: self.seed,
            version: CHECKPOINT_VERSION,
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let manifest: Manifest = serde_json::from_str(line.trim_end()).map_err(|e| bad(e.to_string()))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        if manifest.names.len() != manifest.shapes.len() {
            return Err(bad("names and shapes differ in length".into()));
        }
        let mut arrays = Vec::with_capacity(manifest.names.len());
        let mut buf = [0u8; 8];
        for (name, &[rows, cols]) in manifest.names.into_iter().zip(&manifest.shapes) {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf).map_err(|_| bad(format!("truncated array {name}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            arrays.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if r.read(&mut buf)? != 0 {
            return Err(bad("trailing bytes after the last array".into()));
        }
        Ok(Self { spec: manifest.spec, seed: manifest.seed, arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::from_vec(2, 2, vec![0.1, -1e-300, 3.5, f64::MAX])).unwrap();
        store.add("a.b", Tensor::row_vector(vec![7.0])).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test"}), 9);
        ck.push_store("p.", &store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut fresh = store.clone();
        fresh.tensors_mut()[0].scale(0.0);
        back.load_store("p.", &mut fresh).unwrap();
        assert_eq!(fresh, store);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut ck = Checkpoint::new(serde_json::Value::Null, 0);
        ck.arrays.push(("x".into(), Tensor::row_vector(vec![1.0, 2.0])));
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
