//! Self-describing binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "ISMRNNCK"
//! version    u32      1
//! config     u64 length + UTF-8 JSON of the ModelConfig
//! count      u32      number of parameter entries
//! entry      u32 name length, name, u8 dtype (0 = f64), u32 rank,
//!            rank x u64 dims, numel x f64 row-major values
//! optimizer  u8 flag; when 1: u64 step, u64 epoch, then for every entry in
//!            order its first and second moments (numel x f64 each)
//! ```

use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{IsmrnnModel, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::train::AdamState;

const MAGIC: &[u8; 8] = b"ISMRNNCK";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: IsmrnnModel,
    pub adam: Option<AdamState>,
    pub epoch: u64,
}

pub fn encode(model: &IsmrnnModel, adam: Option<&AdamState>, epoch: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    match adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            out.extend_from_slice(&epoch.to_le_bytes());
            for name in model.params.names() {
                let (m, v) = match (a.m.get(name), a.v.get(name)) {
                    (Some(m), Some(v)) => (m, v),
                    _ => return Err(Error::State(format!("optimizer state lacks `{name}`"))),
                };
                put_f64s(&mut out, m.data());
                put_f64s(&mut out, v.data());
            }
        }
    }
    Ok(out)
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format {
            entry: entry.to_string(),
            reason: format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, entry: &str) -> Result<u8> {
        Ok(self.take(1, entry)?[0])
    }

    fn u32(&mut self, entry: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, entry)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, entry: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, entry)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, entry: &str) -> Result<usize> {
        let v = self.u64(entry)?;
        usize::try_from(v).map_err(|_| Error::Format {
            entry: entry.to_string(),
            reason: format!("length {v} does not fit in memory"),
        })
    }

    fn f64s(&mut self, n: usize, entry: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Format {
            entry: entry.to_string(),
            reason: "element count overflows".into(),
        })?;
        Ok(self
            .take(bytes, entry)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parses a checkpoint and checks its parameters against its own config.
pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "header")? != MAGIC {
        return Err(Error::Format {
            entry: "header".into(),
            reason: "bad magic".into(),
        });
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::Format {
            entry: "header".into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let cfg_len = r.usize("config")?;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?).map_err(|e| Error::Format {
        entry: "config".into(),
        reason: e.to_string(),
    })?;
    let count = r.u32("entries")? as usize;
    let mut params = ParamStore::new();
    for i in 0..count {
        let label = format!("entry {i}");
        let name_len = r.u32(&label)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &label)?)
            .map_err(|e| Error::Format {
                entry: label.clone(),
                reason: e.to_string(),
            })?
            .to_string();
        let dtype = r.u8(&name)?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format {
                entry: name,
                reason: format!("unknown dtype {dtype}"),
            });
        }
        let rank = r.u32(&name)? as usize;
        let dims = (0..rank).map(|_| r.usize(&name)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
            entry: name.clone(),
            reason: "shape overflows".into(),
        })?;
        let data = r.f64s(numel, &name)?;
        params.insert(name, Tensor::new(dims, data)?);
    }
    let (adam, epoch) = match r.u8("optimizer")? {
        0 => (None, 0),
        1 => {
            let step = r.u64("optimizer")?;
            let epoch = r.u64("optimizer")?;
            let (mut m, mut v) = (IndexMap::new(), IndexMap::new());
            for (name, t) in params.iter() {
                let label = format!("optimizer/{name}");
                m.insert(name.to_string(), Tensor::new(t.shape().to_vec(), r.f64s(t.numel(), &label)?)?);
                v.insert(name.to_string(), Tensor::new(t.shape().to_vec(), r.f64s(t.numel(), &label)?)?);
            }
            (Some(AdamState { m, v, step }), epoch)
        }
        f => {
            return Err(Error::Format {
                entry: "optimizer".into(),
                reason: format!("bad flag {f}"),
            })
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Format {
            entry: "trailer".into(),
            reason: format!("{} unexpected trailing bytes", buf.len() - r.pos),
        });
    }
    let model = IsmrnnModel::from_params(config, params)?;
    Ok(Checkpoint { model, adam, epoch })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &IsmrnnModel, adam: Option<&AdamState>, epoch: u64) -> Result<()> {
    std::fs::write(path, encode(model, adam, epoch)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Loads a checkpoint into a model built from `expected`; any parameter whose
/// shape disagrees is a shape error.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<IsmrnnModel> {
    let ck = load_checkpoint(path)?;
    IsmrnnModel::from_params(expected.clone(), ck.model.params)
}
