//! Named-tensor archive: magic, JSON header, raw little-endian `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchDescriptor, NamedTensor, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MPNNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub arch: ArchDescriptor,
    pub seed: u64,
    pub step: u64,
    pub dtype: String,
    /// Free-form metadata (optimizer hyper-parameters, run info, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: ArchiveHeader,
    pub data: Vec<Vec<f32>>,
}

impl Archive {
    pub fn new(arch: ArchDescriptor, seed: u64, step: u64) -> Self {
        Self {
            header: ArchiveHeader {
                arch,
                seed,
                step,
                dtype: "f32".into(),
                extra: serde_json::Value::Null,
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    /// Adds every tensor of `params` under `<group>/<name>`.
    pub fn push_params(&mut self, group: &str, params: &ParamSet<f32>) {
        for t in &params.tensors {
            self.header.tensors.push(TensorEntry {
                name: format!("{group}/{}", t.name),
                shape: t.shape.clone(),
            });
            self.data.push(t.data.clone());
        }
    }

    /// Rebuilds the parameter group written by [`Archive::push_params`].
    pub fn params(&self, group: &str, seed: u64) -> Result<ParamSet<f32>> {
        let arch = &self.header.arch;
        arch.validate()?;
        let mut tensors = Vec::new();
        for (name, shape) in arch.param_shapes() {
            let key = format!("{group}/{name}");
            let idx = self
                .header
                .tensors
                .iter()
                .position(|e| e.name == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if self.header.tensors[idx].shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, architecture expects {shape:?}",
                    self.header.tensors[idx].shape
                )));
            }
            tensors.push(NamedTensor {
                name,
                shape,
                data: self.data[idx].clone(),
            });
        }
        Ok(ParamSet {
            arch: arch.clone(),
            seed,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
        }
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.data.iter().map(|d| d.len() * 4).sum();
        let mut buf = Vec::with_capacity(20 + header.len() + payload);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for d in &self.data {
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        // Write-then-rename so a concurrent reader never sees a torn file.
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io_at(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io_at(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io_at(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io_at(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io_at(path, e))?;
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if buf.len() < 20 || &buf[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        let body = buf.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: ArchiveHeader = serde_json::from_slice(body)?;
        if header.dtype != "f32" {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        let mut offset = 20 + hlen;
        let mut data = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let bytes = buf
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad("truncated payload"))?;
            data.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            offset += 4 * n;
        }
        if offset != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, data })
    }
}

pub fn save_params(params: &ParamSet<f32>, step: u64, path: &Path) -> Result<()> {
    let mut archive = Archive::new(params.arch.clone(), params.seed, step);
    archive.push_params("params", params);
    archive.write(path)
}

/// Loads a parameter archive; fails if it was written for another architecture.
pub fn load_params(path: &Path, expected: Option<&ArchDescriptor>) -> Result<(ParamSet<f32>, u64)> {
    let archive = Archive::read(path)?;
    if let Some(arch) = expected {
        if *arch != archive.header.arch {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has widths {:?}, configuration has {:?}",
                archive.header.arch.widths, arch.widths
            )));
        }
    }
    let params = archive.params("params", archive.header.seed)?;
    Ok((params, archive.header.step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_losslessly() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.ckpt");
        let p = ParamSet::<f32>::init(&ArchDescriptor::tiny(), 77).unwrap();
        save_params(&p, 12, &path).unwrap();
        let (q, step) = load_params(&path, Some(&ArchDescriptor::tiny())).unwrap();
        assert_eq!(step, 12);
        assert_eq!(p, q);
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.ckpt");
        let p = ParamSet::<f32>::init(&ArchDescriptor::tiny(), 1).unwrap();
        save_params(&p, 0, &path).unwrap();
        let other = ArchDescriptor {
            widths: vec![8, 16],
            ..ArchDescriptor::tiny()
        };
        assert!(load_params(&path, Some(&other)).is_err());
    }

    #[test]
    fn garbage_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("junk");
        fs::write(&path, b"hello world, definitely not a checkpoint").unwrap();
        assert!(matches!(Archive::read(&path), Err(Error::Checkpoint(_))));
    }
}
