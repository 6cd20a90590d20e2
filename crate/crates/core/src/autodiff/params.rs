use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered set of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape leaves for every parameter of a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects gradients in store order; parameters unreached by the
    /// backward sweep get zeros.
    pub fn gradients(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.tensors)
            .map(|(&v, t)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Writes the checkpoint container: an 8-byte magic, a little-endian
    /// `u64` index length, the JSON index, then all tensor data as
    /// little-endian `f64` in index order.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut entries = Vec::with_capacity(self.len());
        let mut offset = 0usize;
        for (name, t) in self.iter() {
            entries.push(IndexEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let index = serde_json::to_vec(&CheckpointIndex {
            format: FORMAT.to_string(),
            meta,
            tensors: entries,
        })?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(MAGIC)?;
        write(&(index.len() as u64).to_le_bytes())?;
        write(&index)?;
        for t in &self.tensors {
            for v in t.data() {
                write(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));
        let mut magic = [0u8; 8];
        read(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let mut len = [0u8; 8];
        read(&mut len)?;
        let mut index = vec![0u8; u64::from_le_bytes(len) as usize];
        read(&mut index)?;
        let index: CheckpointIndex = serde_json::from_slice(&index)?;
        if index.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", index.format)));
        }
        let mut store = ParamStore::new();
        let mut expected_offset = 0;
        for e in index.tensors {
            if e.offset != expected_offset {
                return Err(Error::Checkpoint(format!("{}: offset {} out of order", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            read(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(e.name, Tensor::new(e.shape, data)?);
            expected_offset += n;
        }
        Ok((store, index.meta))
    }
}

const MAGIC: &[u8; 8] = b"GICNCKPT";
const FORMAT: &str = "gicn-params-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in `f64` elements.
    offset: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        store.add("b", Tensor::row(vec![std::f64::consts::PI]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        store.save(&path, serde_json::json!({"k": 3})).unwrap();
        let (back, meta) = ParamStore::load(&path).unwrap();
        assert_eq!(meta["k"], 3);
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn load_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Checkpoint(_))));
    }
}
