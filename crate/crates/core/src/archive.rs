//! Named-tensor archives and external weight import.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! b"FMDACL-TENSORS 1\n"
//! u64 entry count
//! per entry: u32 name length, name bytes (UTF-8), u32 rank, u64 dims..., f64 values...
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"FMDACL-TENSORS 1\n";
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Like [`get`](Self::get) but a missing name is an error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<TensorArchive> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut magic = vec![0u8; MAGIC.len()];
        read_exact(r, &mut magic)?;
        if magic != MAGIC {
            return Err(bad("not a tensor archive (bad magic)".into()));
        }
        let count = read_u64(r)?;
        let mut out = TensorArchive::new();
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            if n > MAX_NAME {
                return Err(bad(format!("tensor name length {n} too large")));
            }
            let mut name = vec![0u8; n];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(bad(format!("tensor {name}: rank {rank} unsupported")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l <= (1 << 32))
                .ok_or_else(|| bad(format!("tensor {name}: shape {shape:?} too large")))?;
            let mut raw = vec![0u8; len * 8];
            read_exact(r, &mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            out.insert(name, t)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TensorArchive> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorArchive::read_from(&mut bytes.as_slice())
    }

    /// Adds every parameter and buffer of `store` as `prefix.name`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for p in store.iter() {
            self.insert(format!("{prefix}.{}", p.name), p.value.clone())?;
        }
        Ok(())
    }

    /// Rebuilds a store with the layout of `template` from `prefix.name`
    /// entries.
    pub fn extract_store(&self, prefix: &str, template: &ParamStore) -> Result<ParamStore> {
        let mut out = template.clone();
        for p in out.iter_mut() {
            let key = format!("{prefix}.{}", p.name);
            let t = self.require(&key)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{key}: shape {:?}, network expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(out)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor archive: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parses a name-mapping manifest: one `external_name internal_path` pair
/// per line; blank lines and `#` comments are skipped.
pub fn parse_name_map(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => out.push((a.to_string(), b.to_string())),
            _ => {
                return Err(Error::Invalid(format!(
                    "name map line {}: expected `external_name internal_path`",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Copies mapped tensors from an external archive into `store`. Every mapped
/// name must exist on both sides with identical shape; nothing is written
/// unless all mappings check out. Returns the number of tensors imported.
pub fn import_weights(store: &mut ParamStore, archive: &TensorArchive, map: &[(String, String)]) -> Result<usize> {
    let mut staged = Vec::with_capacity(map.len());
    for (ext, int) in map {
        let src = archive
            .get(ext)
            .ok_or_else(|| Error::Invalid(format!("import: archive has no tensor {ext}")))?;
        let id = store
            .find(int)
            .ok_or_else(|| Error::Invalid(format!("import: network has no parameter {int}")))?;
        if src.shape() != store.get(id).shape() {
            return Err(Error::Shape(format!(
                "import: {ext} has shape {:?}, {int} expects {:?}",
                src.shape(),
                store.get(id).shape()
            )));
        }
        staged.push((id, src.clone()));
    }
    let n = staged.len();
    for (id, t) in staged {
        *store.get_mut(id) = t;
    }
    Ok(n)
}
