//! Binary checkpoint format.
//!
//! ```text
//! magic          8 bytes  "LSRCKPT1"
//! version        u32      1
//! metadata_len   u64
//! metadata       UTF-8 JSON, metadata_len bytes
//! tensor_count   u64
//! directory      tensor_count × { name_len u32, name, dtype u8, rank u32, extents u64 × rank }
//! data           each tensor's scalars in directory order, row-major
//! ```
//!
//! Every integer and scalar is little-endian. `dtype` is 1 for f32 and 2 for
//! f64. The file ends exactly after the last tensor's data. The whole
//! directory is parsed and its byte total checked against the file size
//! before any tensor data is read.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamTree;
use crate::rng::RngState;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"LSRCKPT1";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;

/// Which parameters a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertTag {
    Shared,
    Index(usize),
}

impl Serialize for ExpertTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ExpertTag::Shared => s.serialize_str("shared"),
            ExpertTag::Index(i) => s.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for ExpertTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(u64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(i) => Ok(ExpertTag::Index(i as usize)),
            Raw::Name(s) if s == "shared" => Ok(ExpertTag::Shared),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("expert must be an index or \"shared\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: String,
    pub iteration: u64,
    pub expert: ExpertTag,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub rng_state: Option<RngState>,
}

impl CheckpointMeta {
    pub fn new(stage: impl Into<String>, iteration: u64) -> Self {
        CheckpointMeta { stage: stage.into(), iteration, expert: ExpertTag::Shared, metrics: BTreeMap::new(), rng_state: None }
    }
}

impl crate::esgf::AtIteration for CheckpointMeta {
    fn iteration(&self) -> u64 {
        self.iteration
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Bit-identical comparison (distinguishes NaN payloads and signed zeros).
    pub fn bits_eq(&self, other: &StoredTensor) -> bool {
        match (self, other) {
            (StoredTensor::F32(a), StoredTensor::F32(b)) => {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (StoredTensor::F64(a), StoredTensor::F64(b)) => {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.clone(),
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    /// Snapshot of every tensor in `params`, stored as f64.
    pub fn from_params<P: ParamTree>(meta: CheckpointMeta, params: &P) -> Self {
        let tensors = params.named_tensors().into_iter().map(|(n, t)| (n, StoredTensor::F64(t.clone()))).collect();
        Checkpoint { meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites `params` by name; every parameter must be present.
    pub fn load_into<P: ParamTree>(&self, params: &mut P) -> Result<()> {
        params.load_named(&|name| self.get(name).map(StoredTensor::to_f64))
    }

    pub fn bits_eq(&self, other: &Checkpoint) -> bool {
        self.meta == other.meta
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((n1, a), (n2, b))| n1 == n2 && a.bits_eq(b))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if let Some((k, v)) = self.meta.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("metric `{k}` is {v}")));
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        let mut names = HashSet::new();
        for (name, t) in &self.tensors {
            if !names.insert(name) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            if name.is_empty() || name.len() > MAX_NAME as usize || t.shape().len() > MAX_RANK as usize {
                return Err(Error::Format(format!("tensor `{name}` cannot be stored (name length or rank)")));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            t.write_data(&mut out);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut src = bytes;
        let header = read_header(&mut src, bytes.len() as u64)?;
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let n = e.numel as usize;
            let len = n * e.dtype.size_of();
            let (chunk, rest) = src.split_at(len);
            src = rest;
            let t = match e.dtype {
                DType::F32 => StoredTensor::F32(Tensor::new(e.shape.clone(), read_scalars::<f32>(chunk, &e.name)?)?),
                DType::F64 => StoredTensor::F64(Tensor::new(e.shape.clone(), read_scalars::<f64>(chunk, &e.name)?)?),
            };
            tensors.push((e.name.clone(), t));
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }
}

fn read_scalars<T: Scalar>(chunk: &[u8], name: &str) -> Result<Vec<T>> {
    let w = T::DTYPE.size_of();
    let mut out = Vec::with_capacity(chunk.len() / w);
    for (i, c) in chunk.chunks_exact(w).enumerate() {
        let v = T::read_le(c);
        if !v.as_f64().is_finite() {
            return Err(Error::NonFinite(format!("tensor `{name}` element {i} is {}", v.as_f64())));
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    #[serde(skip)]
    numel: u64,
}

struct Header {
    meta: CheckpointMeta,
    entries: Vec<TensorEntry>,
}

/// Byte source that counts what it has consumed, for truncation messages.
struct Counted<'a, R: Read> {
    inner: &'a mut R,
    used: u64,
    total: u64,
}

impl<R: Read> Counted<'_, R> {
    fn take(&mut self, n: u64, what: &str, tensor: Option<&str>) -> Result<Vec<u8>> {
        if self.total - self.used < n {
            return Err(Error::Truncation {
                tensor: tensor.map(str::to_string),
                detail: format!("{what} needs {n} bytes at offset {}, file has {}", self.used, self.total),
            });
        }
        let mut buf = vec![0u8; n as usize];
        self.inner.read_exact(&mut buf).map_err(|e| Error::Truncation {
            tensor: tensor.map(str::to_string),
            detail: format!("{what}: {e}"),
        })?;
        self.used += n;
        Ok(buf)
    }

    fn u32(&mut self, what: &str, tensor: Option<&str>) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what, tensor)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str, tensor: Option<&str>) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what, tensor)?.try_into().expect("8 bytes")))
    }
}

/// Parses magic through directory and checks the declared data size against
/// `total` bytes. Leaves `src` positioned at the first data byte.
fn read_header<R: Read>(src: &mut R, total: u64) -> Result<Header> {
    let mut c = Counted { inner: src, used: 0, total };
    let magic = c.take(8, "magic", None).map_err(|_| Error::Format("file shorter than the magic tag".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let version = c.u32("version", None)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let meta_len = c.u64("metadata length", None)?;
    let meta_bytes = c.take(meta_len, "metadata", None)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::Format(format!("metadata JSON: {e}")))?;
    let count = c.u64("tensor count", None)?;
    // Smallest directory entry: name_len + 1-byte name + dtype + rank.
    if count > (total - c.used) / 10 {
        return Err(Error::Truncation { tensor: None, detail: format!("{count} tensors cannot fit in the remaining bytes") });
    }
    let mut entries = Vec::with_capacity(count as usize);
    let mut names = HashSet::new();
    for i in 0..count {
        let label = format!("directory entry {i}");
        let name_len = c.u32(&label, None)?;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(Error::Format(format!("{label}: name length {name_len}")));
        }
        let name = String::from_utf8(c.take(name_len as u64, &label, None)?)
            .map_err(|_| Error::Format(format!("{label}: name is not UTF-8")))?;
        if !names.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let code = c.take(1, "dtype", Some(&name))?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("tensor `{name}`: unknown dtype code {code}")))?;
        let rank = c.u32("rank", Some(&name))?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("tensor `{name}`: rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = c.u64("extent", Some(&name))?;
            numel = numel.checked_mul(e).ok_or_else(|| Error::Format(format!("tensor `{name}`: size overflow")))?;
            shape.push(e as usize);
        }
        entries.push(TensorEntry { name, dtype, shape, numel });
    }
    let mut offset = c.used;
    for e in &entries {
        let len = e.numel.checked_mul(e.dtype.size_of() as u64).ok_or_else(|| Error::Format(format!("tensor `{}`: size overflow", e.name)))?;
        let end = offset.checked_add(len).ok_or_else(|| Error::Format("size overflow".into()))?;
        if end > total {
            return Err(Error::Truncation {
                tensor: Some(e.name.clone()),
                detail: format!("data needs bytes {offset}..{end}, file has {total}"),
            });
        }
        offset = end;
    }
    if offset != total {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", total - offset)));
    }
    Ok(Header { meta, entries })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub version: u32,
    pub bytes: u64,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
    pub num_scalars: u64,
}

/// Checks structure and finiteness, streaming tensor data in fixed-size chunks.
pub fn validate_checkpoint(path: &Path) -> Result<ValidationReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let total = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut src = BufReader::new(file);
    let header = read_header(&mut src, total)?;
    let mut buf = vec![0u8; 1 << 16];
    let mut num_scalars = 0;
    for e in &header.entries {
        let w = e.dtype.size_of();
        let per_chunk = buf.len() / w;
        let mut left = e.numel;
        let mut index = 0u64;
        while left > 0 {
            let n = left.min(per_chunk as u64) as usize;
            let chunk = &mut buf[..n * w];
            src.read_exact(chunk).map_err(|err| Error::Truncation { tensor: Some(e.name.clone()), detail: err.to_string() })?;
            let bad = match e.dtype {
                DType::F32 => chunk.chunks_exact(4).position(|c| !f32::read_le(c).is_finite()),
                DType::F64 => chunk.chunks_exact(8).position(|c| !f64::read_le(c).is_finite()),
            };
            if let Some(p) = bad {
                return Err(Error::NonFinite(format!("tensor `{}` element {}", e.name, index + p as u64)));
            }
            left -= n as u64;
            index += n as u64;
        }
        num_scalars += e.numel;
    }
    Ok(ValidationReport { version: VERSION, bytes: total, meta: header.meta, tensors: header.entries, num_scalars })
}
