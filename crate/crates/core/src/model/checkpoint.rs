//! Binary checkpoint format.
//!
//! ```text
//! "ELNT"                      magic
//! u16                         version
//! u32 + UTF-8                 "key=value" lines: model config, then
//!                             metadata keys prefixed with "meta."
//! repeated until end of file:
//!   u32 + UTF-8               tensor name
//!   u32, u32 * rank           dims
//!   f32 * numel               values
//! ```
//!
//! Integers and floats are little-endian. Besides the trainable tensors the
//! file carries the running statistics of every norm layer.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::RunningStats;
use crate::tensor::Tensor;

use super::{ElNet, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ELNT";
pub const CHECKPOINT_VERSION: u16 = 1;

const META_PREFIX: &str = "meta.";

/// A model plus free-form string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ElNet,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: ElNet) -> Self {
        Checkpoint {
            model,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.model.param_count() * 4 + 4096);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        let mut header = String::new();
        for (k, v) in self.model.config().to_kv() {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::invalid(format!("metadata entry {k:?} cannot be encoded")));
            }
            header.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        put_bytes(&mut out, header.as_bytes())?;

        for (info, p) in self.model.layout().iter().zip(self.model.params()) {
            put_tensor(&mut out, &info.name, p.dims(), p.data())?;
        }
        for (name, r) in self.model.norm_names().iter().zip(self.model.running_stats()) {
            let c = r.mean.len();
            put_tensor(&mut out, &format!("{name}.running_mean"), &[c], &r.mean)?;
            put_tensor(&mut out, &format!("{name}.running_var"), &[c], &r.var)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint: bad magic"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }

        let header = std::str::from_utf8(r.sized()?).map_err(|_| Error::format("header is not UTF-8"))?;
        let mut config = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad header line {line:?}")))?;
            match k.strip_prefix(META_PREFIX) {
                Some(meta) => metadata.insert(meta.to_string(), v.to_string()),
                None => config.insert(k.to_string(), v.to_string()),
            };
        }
        let cfg = ModelConfig::from_kv(&config)?;
        let known: Vec<(String, String)> = cfg.to_kv();
        if let Some(extra) = config.keys().find(|k| !known.iter().any(|(n, _)| n == *k)) {
            return Err(Error::format(format!("unknown config key {extra:?}")));
        }

        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name = std::str::from_utf8(r.sized()?)
                .map_err(|_| Error::format("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let numel = numel.ok_or_else(|| Error::format(format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(dims, values).map_err(|e| Error::format(e.to_string()))?));
        }

        // Match the stored tensors against the layout the config implies.
        let template = ElNet::new(cfg.clone())?;
        let mut by_name: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::format(format!("duplicate tensor {name:?}")));
            }
        }
        let mut take = |name: &str| {
            by_name
                .remove(name)
                .ok_or_else(|| Error::format(format!("checkpoint is missing {name:?}")))
        };
        let params = template
            .layout()
            .iter()
            .map(|info| take(&info.name))
            .collect::<Result<Vec<_>>>()?;
        let running = template
            .norm_names()
            .iter()
            .map(|name| {
                Ok(RunningStats {
                    mean: take(&format!("{name}.running_mean"))?.into_data(),
                    var: take(&format!("{name}.running_var"))?.into_data(),
                    momentum: RunningStats::<f32>::new(0).momentum,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::format(format!("unexpected tensor {extra:?}")));
        }
        Ok(Checkpoint {
            model: ElNet::from_parts(cfg, params, running)?,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::invalid(format!("length {n} does not fit the format")))
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    out.extend_from_slice(&len_u32(bytes.len())?);
    out.extend_from_slice(bytes);
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    put_bytes(out, name.as_bytes())?;
    out.extend_from_slice(&len_u32(dims.len())?);
    for d in dims {
        out.extend_from_slice(&len_u32(*d)?);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn sized(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
