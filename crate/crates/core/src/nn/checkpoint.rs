//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GENZ" | version u32 | count u32
//! count x { name_len u32 | name | dtype u8 | ndim u32 | dims u64.. | offset u64 | nbytes u64 }
//! payload_len u64 | payload
//! meta_len u64 | metadata JSON
//! ```
//!
//! Offsets are relative to the start of the payload. Tensors are written in
//! name order, so equal contents always serialize to equal bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::arch::ArchConfig;
use super::model::{ModelGraph, RunningStats};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GENZ";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("tensors {0} and {1} have overlapping payload ranges")]
    OverlappingOffsets(String, String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: expected {expected:?}, found {found:?}")]
    WrongDType { name: String, expected: DType, found: DType },
    #[error("metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    /// Stable numeric code per failure class.
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::BadMagic => 1,
            CheckpointError::UnsupportedVersion(_) => 2,
            CheckpointError::Truncated(_) => 3,
            CheckpointError::OverlappingOffsets(..) => 4,
            CheckpointError::Corrupt(_) => 5,
            CheckpointError::Missing(_) => 6,
            CheckpointError::WrongDType { .. } => 7,
            CheckpointError::Metadata(_) => 8,
            CheckpointError::Io(_) => 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I32 => TensorData::I32(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata,
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = match T::DTYPE {
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
            _ => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
        };
        self.tensors.insert(
            name.into(),
            StoredTensor {
                shape: t.shape().to_vec(),
                data,
            },
        );
    }

    pub fn insert_i32(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<i32>) {
        self.tensors.insert(
            name.into(),
            StoredTensor {
                shape: shape.to_vec(),
                data: TensorData::I32(values),
            },
        );
    }

    /// Float tensor converted to `T`; exact when the stored dtype is `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        let st = self.tensors.get(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
        let data: Vec<T> = match &st.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            TensorData::I32(_) => {
                return Err(CheckpointError::WrongDType {
                    name: name.into(),
                    expected: T::DTYPE,
                    found: DType::I32,
                })
            }
        };
        Tensor::new(st.shape.clone(), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    pub fn ints(&self, name: &str) -> Result<(&[usize], &[i32]), CheckpointError> {
        let st = self.tensors.get(name).ok_or_else(|| CheckpointError::Missing(name.into()))?;
        match &st.data {
            TensorData::I32(v) => Ok((&st.shape, v)),
            other => Err(CheckpointError::WrongDType {
                name: name.into(),
                expected: DType::I32,
                found: other.dtype(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, st) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(st.data.dtype().code());
            out.extend_from_slice(&(st.shape.len() as u32).to_le_bytes());
            for &d in &st.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let nbytes = (st.data.len() * st.data.dtype().size()) as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&nbytes.to_le_bytes());
            offset += nbytes;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for st in self.tensors.values() {
            st.data.write(&mut out);
        }
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values serialize");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("tensor table")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor table")?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let code = r.take(1, "tensor table")?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown dtype code {}", code)))?;
            let ndim = r.u32("tensor table")? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Corrupt(format!("tensor {} has {} dims", name, ndim)));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("tensor table")? as usize);
            }
            let offset = r.u64("tensor table")?;
            let nbytes = r.u64("tensor table")?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(dtype.size())) != Some(nbytes as usize) {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {} byte length {} does not match shape {:?}",
                    name, nbytes, shape
                )));
            }
            entries.push((name, dtype, shape, offset, nbytes));
        }
        let payload_len = r.u64("payload length")? as usize;
        let payload = r.take(payload_len, "payload")?;
        let mut ranges: Vec<(u64, u64, &str)> = entries
            .iter()
            .map(|(n, _, _, o, b)| (*o, o.saturating_add(*b), n.as_str()))
            .collect();
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(CheckpointError::OverlappingOffsets(w[0].2.into(), w[1].2.into()));
            }
        }
        if let Some(last) = ranges.last() {
            if last.1 > payload_len as u64 {
                return Err(CheckpointError::Truncated("payload"));
            }
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta = r.take(meta_len, "metadata")?;
        let metadata = serde_json::from_slice(meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, dtype, shape, offset, nbytes) in entries {
            let slice = &payload[offset as usize..(offset + nbytes) as usize];
            let st = StoredTensor {
                shape,
                data: TensorData::read(dtype, slice),
            };
            if tensors.insert(name.clone(), st).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {}", name)));
            }
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        atomic_write(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Metadata fields of a model checkpoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ModelMeta {
    kind: String,
    arch: ArchConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

impl<T: Scalar> ModelGraph<T> {
    /// Parameters plus BN running statistics, with the arch config in the metadata.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = ModelMeta {
            kind: "model".into(),
            arch: self.arch.clone(),
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("serializable"));
        for (name, t) in &self.params {
            ck.insert(name.clone(), t);
        }
        for (name, st) in &self.bn_stats {
            let c = st.mean.len();
            ck.insert(format!("{}.running_mean", name), &Tensor::new(vec![c], st.mean.clone()).expect("1-d"));
            ck.insert(format!("{}.running_var", name), &Tensor::new(vec![c], st.var.clone()).expect("1-d"));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let meta: ModelMeta =
            serde_json::from_value(ck.metadata.clone()).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        if meta.kind != "model" {
            return Err(CheckpointError::Metadata(format!("expected a model checkpoint, found {}", meta.kind)));
        }
        let mut m = ModelGraph::build(&meta.arch).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        for (name, t) in m.params.iter_mut() {
            let loaded = ck.tensor::<T>(name)?;
            if loaded.shape() != t.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    name,
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        let names: Vec<String> = m.bn_stats.keys().cloned().collect();
        for name in names {
            let mean = ck.tensor::<T>(&format!("{}.running_mean", name))?.into_data();
            let var = ck.tensor::<T>(&format!("{}.running_var", name))?.into_data();
            if mean.len() != m.bn_stats[&name].mean.len() || var.len() != mean.len() {
                return Err(CheckpointError::Corrupt(format!("running stats of {} have the wrong size", name)));
            }
            m.bn_stats.insert(name, RunningStats { mean, var });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), CheckpointError> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
