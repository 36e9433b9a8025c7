//! Binary checkpoint of named tensors.
//!
//! Layout (little-endian):
//!
//! | bytes | content                                             |
//! |-------|-----------------------------------------------------|
//! | 4     | magic `VGCK`                                        |
//! | 4     | format version (`u32`)                              |
//! | 8     | header length `n` (`u64`)                           |
//! | n     | JSON header: manifest hash, metadata, tensor shapes |
//! | ...   | tensor values as `f64`, in header order             |

use super::{DiffError, ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VGCK";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest_hash: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    manifest_hash: String,
    metadata: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

impl Checkpoint {
    pub fn new(manifest_hash: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self { manifest_hash: manifest_hash.into(), metadata, tensors: Vec::new() }
    }

    /// Appends every parameter under `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies `prefix`-named tensors into `params`, which must match exactly in names and shapes.
    pub fn restore_params(&self, prefix: &str, params: &mut ParamSet) -> Result<(), DiffError> {
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", params.name(id));
            let t = self.get(&name).ok_or_else(|| DiffError::Checkpoint(format!("missing tensor {name}")))?;
            let dst = params.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(DiffError::Shape(format!(
                    "{name}: checkpoint has {}x{}, model expects {}x{}",
                    t.rows, t.cols, dst.rows, dst.cols
                )));
            }
            dst.data.copy_from_slice(&t.data);
        }
        Ok(())
    }
}

/// Writes atomically via a temporary file in the same directory.
pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), DiffError> {
    let path = path.as_ref();
    let header = Header {
        version: CHECKPOINT_VERSION,
        manifest_hash: ckpt.manifest_hash.clone(),
        metadata: ckpt.metadata.clone(),
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, t)| TensorHeader { name: name.clone(), rows: t.rows, cols: t.cols })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
    let total: usize = ckpt.tensors.iter().map(|(_, t)| t.len()).sum();
    let mut buf = Vec::with_capacity(16 + header.len() + total * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &ckpt.tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, DiffError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let bad = |m: &str| DiffError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
    let mut off = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for th in header.tensors {
        let n = th.rows * th.cols;
        let raw = bytes.get(off..off + n * 8).ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((th.name, Tensor { rows: th.rows, cols: th.cols, data }));
        off += n * 8;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { manifest_hash: header.manifest_hash, metadata: header.metadata, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        p.linear("l", 5, 3, &mut rng).unwrap();
        p.add("odd", Tensor::row_vector(vec![f64::MIN_POSITIVE, -0.0, 1e300])).unwrap();
        let mut ck = Checkpoint::new("abc", serde_json::json!({"iteration": 4}));
        ck.push_params("model.", &p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        write_checkpoint(&path, &ck).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let mut q = p.clone();
        q.get_mut(q.find("l.w").unwrap()).data.iter_mut().for_each(|v| *v = 0.0);
        back.restore_params("model.", &mut q).unwrap();
        let bits = |s: &ParamSet| s.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&q), bits(&p));
    }

    #[test]
    fn shape_mismatch_on_restore() {
        let mut p = ParamSet::new();
        p.add("a", Tensor::zeros(2, 2)).unwrap();
        let mut ck = Checkpoint::new("", serde_json::Value::Null);
        ck.push_params("", &p);
        let mut q = ParamSet::new();
        q.add("a", Tensor::zeros(3, 2)).unwrap();
        assert!(matches!(ck.restore_params("", &mut q), Err(DiffError::Shape(_))));
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
