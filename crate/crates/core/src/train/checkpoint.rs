//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! | field        | encoding                                             |
//! |--------------|------------------------------------------------------|
//! | magic        | `OCUN`                                               |
//! | version      | u32                                                  |
//! | config       | u32 length + UTF-8 TOML model config                 |
//! | metadata     | u32 length + UTF-8 JSON (epoch, history, optimizer)  |
//! | index        | u32 count, then per tensor: u32 name length, name,   |
//! |              | u32 rank, u32 dims, u64 offset, u64 length           |
//! | payload      | u64 element count + f32 values                       |
//! | checksum     | CRC-32 of every preceding byte                       |
//!
//! Offsets and lengths count f32 elements from the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::EpochRecord;
use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"OCUN";
pub const FORMAT_VERSION: u32 = 1;

const MEAN_PREFIX: &str = "running_mean:";
const VAR_PREFIX: &str = "running_var:";
const ADAM_M_PREFIX: &str = "adam_m:";
const ADAM_V_PREFIX: &str = "adam_v:";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_dice: Option<f64>,
    /// Optimizer settings and step count; moments live in the tensor index.
    pub adam: Option<(AdamConfig, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

fn named<T: Scalar>(name: String, shape: &[usize], data: impl Iterator<Item = T>) -> NamedTensor {
    NamedTensor {
        name,
        shape: shape.to_vec(),
        data: data.map(|v| v.as_f64() as f32).collect(),
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &Model<T>,
        adam: Option<&AdamState<T>>,
        mut meta: CheckpointMeta,
    ) -> Self {
        let p = &model.params;
        let mut tensors = Vec::new();
        for id in p.ids() {
            let t = p.get(id);
            tensors.push(named(p.name(id).to_string(), t.shape(), t.data().iter().copied()));
        }
        for id in p.stats_ids() {
            let s = p.stats(id);
            let name = p.stats_name(id);
            let c = [s.channels()];
            tensors.push(named(format!("{MEAN_PREFIX}{name}"), &c, s.mean.iter().copied()));
            tensors.push(named(format!("{VAR_PREFIX}{name}"), &c, s.var.iter().copied()));
        }
        meta.adam = adam.map(|a| (a.config, a.t));
        if let Some(a) = adam {
            for id in p.ids() {
                let name = p.name(id);
                let (m, v) = (&a.m[id.0], &a.v[id.0]);
                tensors.push(named(format!("{ADAM_M_PREFIX}{name}"), m.shape(), m.data().iter().copied()));
                tensors.push(named(format!("{ADAM_V_PREFIX}{name}"), v.shape(), v.data().iter().copied()));
            }
        }
        Self {
            config: model.config().clone(),
            meta,
            tensors,
        }
    }

    fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model (and optimizer, if stored). When `expected` is given
    /// the stored architecture must match it.
    pub fn restore<T: Scalar>(
        &self,
        expected: Option<&ModelConfig>,
    ) -> Result<(Model<T>, Option<AdamState<T>>)> {
        if let Some(want) = expected {
            if want != &self.config {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: {}",
                    config_diff(&self.config, want)
                )));
            }
        }
        self.config.validate()?;
        let mut model = Model::<T>::new(&self.config, 0)?;
        let to_tensor = |nt: &NamedTensor, want: &[usize]| -> Result<Tensor<T>> {
            if nt.shape != want {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, architecture expects {:?}",
                    nt.name, nt.shape, want
                )));
            }
            Tensor::new(want, nt.data.iter().map(|&v| T::from_f64(v as f64)).collect())
        };
        let missing = |name: &str| Error::Checkpoint(format!("tensor {name} missing from checkpoint"));

        let ids: Vec<_> = model.params.ids().collect();
        for &id in &ids {
            let name = model.params.name(id).to_string();
            let nt = self.find(&name).ok_or_else(|| missing(&name))?;
            let t = to_tensor(nt, model.params.get(id).shape())?;
            model.params.set(id, t)?;
        }
        let stats: Vec<_> = model.params.stats_ids().collect();
        for id in stats {
            let name = model.params.stats_name(id).to_string();
            let c = [model.params.stats(id).channels()];
            let mean_name = format!("{MEAN_PREFIX}{name}");
            let var_name = format!("{VAR_PREFIX}{name}");
            let mean = to_tensor(self.find(&mean_name).ok_or_else(|| missing(&mean_name))?, &c)?;
            let var = to_tensor(self.find(&var_name).ok_or_else(|| missing(&var_name))?, &c)?;
            model.params.set_stats(
                id,
                RunningStats {
                    mean: mean.into_vec(),
                    var: var.into_vec(),
                },
            )?;
        }
        let known = model.params.len() * 3 + model.params.stats_ids().count() * 2;
        if self.tensors.len() > known {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, more than the architecture can use",
                self.tensors.len()
            )));
        }

        let adam = match self.meta.adam {
            None => None,
            Some((config, t)) => {
                let mut state = AdamState::new(config, &model.params);
                state.t = t;
                for &id in &ids {
                    let name = model.params.name(id);
                    let shape = model.params.get(id).shape().to_vec();
                    let m_name = format!("{ADAM_M_PREFIX}{name}");
                    let v_name = format!("{ADAM_V_PREFIX}{name}");
                    state.m[id.0] = to_tensor(self.find(&m_name).ok_or_else(|| missing(&m_name))?, &shape)?;
                    state.v[id.0] = to_tensor(self.find(&v_name).ok_or_else(|| missing(&v_name))?, &shape)?;
                }
                Some(state)
            }
        };
        Ok((model, adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config.to_toml());
        put_str(
            &mut out,
            &serde_json::to_string(&self.meta).expect("checkpoint metadata serializes"),
        );
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            offset += t.data.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch (stored {stored:08x}, computed {actual:08x}); file is corrupt or truncated"
            )));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let config = ModelConfig::from_toml(&r.string()?)?;
        let meta: CheckpointMeta = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut index = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            if shape.iter().product::<usize>() != len {
                return Err(Error::Checkpoint(format!(
                    "index entry {name}: shape {shape:?} does not hold {len} values"
                )));
            }
            index.push((name, shape, offset, len));
        }
        let total = r.u64()? as usize;
        let payload = r.take(total.checked_mul(4).ok_or_else(trunc)?)?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensors = index
            .into_iter()
            .map(|(name, shape, offset, len)| {
                let data = values
                    .get(offset..offset + len)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name} lies outside the payload")))?
                    .to_vec();
                Ok(NamedTensor { name, shape, data })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            meta,
            tensors,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn trunc() -> Error {
    Error::Checkpoint("truncated file".into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(trunc)?;
        let s = self.buf.get(self.pos..end).ok_or_else(trunc)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string field is not UTF-8".into()))
    }
}

/// Human-readable list of the config lines that differ.
fn config_diff(stored: &ModelConfig, wanted: &ModelConfig) -> String {
    let a = stored.to_toml();
    let b = wanted.to_toml();
    let la: Vec<&str> = a.lines().collect();
    let lb: Vec<&str> = b.lines().collect();
    let diffs: Vec<String> = la
        .iter()
        .filter(|l| !lb.contains(l))
        .map(|l| format!("checkpoint has `{l}`"))
        .chain(
            lb.iter()
                .filter(|l| !la.contains(l))
                .map(|l| format!("expected `{l}`")),
        )
        .collect();
    if diffs.is_empty() {
        "configs differ".into()
    } else {
        diffs.join("; ")
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
