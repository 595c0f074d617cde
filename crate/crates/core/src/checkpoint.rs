//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SEGFCKPT"
//! version    u32
//! header_len u64
//! header     header_len bytes of JSON (see [`Header`])
//! blobs      raw little-endian tensor data, in table order
//! ```
//!
//! Parameters and optimizer moments are stored in the network's element
//! type; batch-norm running statistics are always `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::architectures::{BuildConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};
use crate::training::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 8] = b"SEGFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamHeader {
    pub config: AdamConfig,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub spec_hash: String,
    pub build: BuildConfig,
    pub dtype: DType,
    pub adam: Option<AdamHeader>,
    /// Batch-norm layers whose running statistics were ever updated.
    pub bn_updated: Vec<bool>,
    pub tensors: Vec<TensorEntry>,
}

fn fail<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn put<T: Element>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.to_f64().to_le_bytes()),
        }
    }
}

fn dtype_bytes(d: DType) -> usize {
    match d {
        DType::F32 => 4,
        DType::F64 => 8,
    }
}

/// Serializes a network (and optionally its optimizer state) to bytes.
pub fn to_bytes<T: Element>(net: &Network<T>, adam: Option<&AdamState<T>>) -> Result<Vec<u8>> {
    let mut table = Vec::new();
    let mut blob = Vec::new();
    let mut push = |name: String, dtype: DType, shape: &[usize], bytes: &mut dyn FnMut(&mut Vec<u8>)| {
        table.push(TensorEntry { name, dtype, shape: shape.to_vec(), offset: blob.len() as u64 });
        bytes(&mut blob);
    };
    let params = net.params();
    for p in params.iter() {
        push(p.name.clone(), T::DTYPE, p.value.shape(), &mut |out| put(out, p.value.data()));
    }
    if let Some(st) = adam {
        if st.m.len() != params.len() {
            return fail("optimizer state does not match the network");
        }
        for (k, p) in params.iter().enumerate() {
            push(format!("adam.m.{}", p.name), T::DTYPE, st.m[k].shape(), &mut |out| put(out, st.m[k].data()));
            push(format!("adam.v.{}", p.name), T::DTYPE, st.v[k].shape(), &mut |out| put(out, st.v[k].data()));
        }
    }
    for (k, bn) in net.bn_states().iter().enumerate() {
        let c = [bn.channels()];
        push(format!("bn.{k}.running_mean"), DType::F64, &c, &mut |out| put(out, &bn.running_mean));
        push(format!("bn.{k}.running_var"), DType::F64, &c, &mut |out| put(out, &bn.running_var));
    }
    let header = Header {
        spec_hash: net.spec_hash(),
        build: *net.config(),
        dtype: T::DTYPE,
        adam: adam.map(|a| AdamHeader { config: a.config, t: a.t }),
        bn_updated: net.bn_states().iter().map(|b| b.updated).collect(),
        tensors: table,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial checkpoint.
pub fn save<T: Element>(path: &Path, net: &Network<T>, adam: Option<&AdamState<T>>) -> Result<()> {
    let bytes = to_bytes(net, adam)?;
    let tmp = path.with_extension("bin.partial");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Splits a checkpoint into its header and blob section.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 {
        return fail(format!("file is {} bytes, too short for a checkpoint", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return fail("bad magic, not a checkpoint");
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return fail(format!("unsupported checkpoint version {version}"));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = 20usize.checked_add(usize::try_from(len).unwrap_or(usize::MAX)).filter(|&e| e <= bytes.len());
    let Some(end) = end else {
        return fail(format!("header of {len} bytes runs past the end of the file"));
    };
    let header: Header = serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    Ok((header, &bytes[end..]))
}

struct Blobs<'a> {
    data: &'a [u8],
    table: &'a [TensorEntry],
}

impl Blobs<'_> {
    fn values(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let Some(e) = self.table.iter().find(|e| e.name == name) else {
            return fail(format!("tensor {name} missing"));
        };
        if e.shape != shape {
            return fail(format!("tensor {name} has shape {:?}, expected {shape:?}", e.shape));
        }
        let width = dtype_bytes(e.dtype);
        let n: usize = shape.iter().product();
        let start = usize::try_from(e.offset).unwrap_or(usize::MAX);
        let Some(bytes) = start.checked_add(n * width).and_then(|end| self.data.get(start..end)) else {
            return fail(format!("tensor {name} is truncated"));
        };
        Ok(match e.dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        })
    }

    fn tensor<T: Element>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        Tensor::new(shape, self.values(name, shape)?.into_iter().map(T::from_f64).collect())
    }

    fn expected_len(&self) -> usize {
        self.table
            .iter()
            .map(|e| e.offset as usize + e.shape.iter().product::<usize>() * dtype_bytes(e.dtype))
            .max()
            .unwrap_or(0)
    }
}

/// Fills `net` from checkpoint bytes. The network's architecture hash must
/// equal the stored one; nothing is modified unless every tensor loads.
pub fn load_into<T: Element>(net: &mut Network<T>, bytes: &[u8]) -> Result<Option<AdamState<T>>> {
    let (header, data) = read_header(bytes)?;
    let hash = net.spec_hash();
    if header.spec_hash != hash {
        return fail(format!(
            "checkpoint was written by a different architecture ({} x{}), hash {} != {}",
            header.build.arch, header.build.width_mult, header.spec_hash, hash
        ));
    }
    let blobs = Blobs { data, table: &header.tensors };
    if blobs.expected_len() != data.len() {
        return fail(format!("blob section is {} bytes, table describes {}", data.len(), blobs.expected_len()));
    }
    let mut values = Vec::with_capacity(net.params().len());
    for p in net.params().iter() {
        values.push(blobs.tensor::<T>(&p.name, p.value.shape())?);
    }
    let adam = match &header.adam {
        None => None,
        Some(a) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for p in net.params().iter() {
                m.push(blobs.tensor::<T>(&format!("adam.m.{}", p.name), p.value.shape())?);
                v.push(blobs.tensor::<T>(&format!("adam.v.{}", p.name), p.value.shape())?);
            }
            Some(AdamState { config: a.config, t: a.t, m, v })
        }
    };
    if header.bn_updated.len() != net.bn_states().len() {
        return fail("batch-norm layer count differs");
    }
    let mut stats = Vec::new();
    for (k, bn) in net.bn_states().iter().enumerate() {
        let c = [bn.channels()];
        stats.push((blobs.values(&format!("bn.{k}.running_mean"), &c)?, blobs.values(&format!("bn.{k}.running_var"), &c)?));
    }

    for (k, t) in values.into_iter().enumerate() {
        *net.params_mut().value_mut(k) = t;
    }
    for ((bn, (mean, var)), updated) in net.bn_states_mut().iter_mut().zip(stats).zip(&header.bn_updated) {
        bn.running_mean = mean;
        bn.running_var = var;
        bn.updated = *updated;
    }
    Ok(adam)
}

/// Builds the recorded architecture and loads it.
pub fn load<T: Element>(path: &Path) -> Result<(Network<T>, Option<AdamState<T>>, Header)> {
    let bytes = std::fs::read(path)?;
    let (header, _) = read_header(&bytes)?;
    let mut net = Network::build(header.build).map_err(|e| Error::Checkpoint(format!("cannot rebuild network: {e}")))?;
    let adam = load_into(&mut net, &bytes)?;
    Ok((net, adam, header))
}
