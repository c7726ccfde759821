//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes   "MDCKPT\0\x01"
//! format version   u32
//! architecture id  u32       1 = intent, 2 = rt
//! meta length      u32
//! meta             JSON      CheckpointMeta
//! value count      u64
//! values           f32 x count   parameters in Network::parameters() order,
//!                                then per block running mean and variance
//! crc32            u32       over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Network, NetworkMeta};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Scalar};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MDCKPT\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Hyperparameter record stored in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub seed: u64,
    pub network: NetworkMeta,
    pub parameter_count: usize,
    pub tensors: Vec<TensorEntry>,
}

fn encode<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        architecture: net.arch,
        seed: net.seed,
        network: net.meta.clone(),
        parameter_count: net.parameter_count(),
        tensors: net
            .parameter_names()
            .into_iter()
            .zip(net.parameters())
            .map(|(name, p)| TensorEntry {
                name,
                shape: p.shape().to_vec(),
            })
            .collect(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut values: Vec<f32> = Vec::new();
    for p in net.parameters() {
        values.extend(p.data().iter().map(|v| v.as_f64() as f32));
    }
    for s in net.running_stats() {
        values.extend(s.mean.iter().map(|v| v.as_f64() as f32));
        values.extend(s.var.iter().map(|v| v.as_f64() as f32));
    }

    let mut out = Vec::with_capacity(32 + meta_json.len() + values.len() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&net.arch.id().to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes a checkpoint. Values are stored as `f32`, so only `f32` networks
/// round-trip bit for bit.
pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
        return Err(Error::format(path, "file too short to be a checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let expected = u32::from_le_bytes(tail.try_into().unwrap());
    let found = crc32fast::hash(body);
    if expected != found {
        return Err(Error::Checksum {
            what: path.display().to_string(),
            expected,
            found,
        });
    }

    let mut r = Reader { bytes: body, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let arch_id = r.u32()?;
    let arch = Architecture::from_id(arch_id)
        .ok_or_else(|| Error::format(path, format!("unknown architecture id {arch_id}")))?;
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    if meta.architecture != arch {
        return Err(Error::ArchitectureMismatch {
            expected: arch.to_string(),
            found: meta.architecture.to_string(),
        });
    }

    let mut net = Network::<T>::new(arch, meta.seed);
    net.meta = meta.network.clone();
    let stats_len: usize = net.blocks.iter().map(|b| 2 * b.norm.channels()).sum();
    let count = r.u64()? as usize;
    if count != net.parameter_count() + stats_len {
        return Err(Error::format(
            path,
            format!("payload holds {count} values, {arch} network needs {}", net.parameter_count() + stats_len),
        ));
    }
    for (entry, p) in meta.tensors.iter().zip(net.parameters()) {
        if entry.shape != p.shape() {
            return Err(Error::format(path, format!("tensor {} has shape {:?}, expected {:?}", entry.name, entry.shape, p.shape())));
        }
    }
    let payload = r.take(count * 4)?;
    let mut values = payload
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
    for p in net.parameters_mut() {
        for v in p.data_mut() {
            *v = values.next().unwrap();
        }
    }
    for b in &mut net.blocks {
        let c = b.norm.channels();
        let mean: Vec<T> = values.by_ref().take(c).collect();
        let var: Vec<T> = values.by_ref().take(c).collect();
        b.norm.stats = RunningStats {
            mean,
            var,
            initialized: true,
        };
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(net)
}

/// Loads a checkpoint and insists on a particular architecture.
pub fn load_checkpoint_as<T: Scalar>(path: impl AsRef<Path>, arch: Architecture) -> Result<Network<T>> {
    let net = load_checkpoint(path)?;
    if net.arch != arch {
        return Err(Error::ArchitectureMismatch {
            expected: arch.to_string(),
            found: net.arch.to_string(),
        });
    }
    Ok(net)
}
