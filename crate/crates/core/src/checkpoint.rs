//! Binary checkpoint of a trained fold.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "NHGC"
//! version  u32
//! count    u32      number of tensor records
//! record   name_len u32, name (UTF-8), rank u32, dims u64 x rank,
//!          values f64 x prod(dims), row-major
//! ```
//!
//! Record names: `param/<name>` for model parameters, `adam.m/<name>` and
//! `adam.v/<name>` for the moments, `adam.step`, `scaler.mean`,
//! `scaler.sd`, `templates.mdd`, `templates.hc`, `meta.tau`, `meta.epoch`.

use std::fs;
use std::path::Path;

use autograd::{OptimizerState, Tensor};

use crate::data::{GroupTemplates, Scaler};
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"NHGC";
pub const VERSION: u32 = 1;

/// Everything needed to score a cohort with a trained fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn build(model: &Model, optimizer: Option<&OptimizerState>, scaler: &Scaler, templates: &GroupTemplates, tau: f64, epoch: usize) -> Self {
        let mut tensors = Vec::new();
        for (name, t) in model.params.iter() {
            tensors.push((format!("param/{name}"), t.clone()));
        }
        if let Some(opt) = optimizer {
            for ((name, _), (m, v)) in model.params.iter().zip(opt.first.iter().zip(&opt.second)) {
                tensors.push((format!("adam.m/{name}"), m.clone()));
                tensors.push((format!("adam.v/{name}"), v.clone()));
            }
            tensors.push(("adam.step".into(), Tensor::scalar(opt.step as f64)));
        }
        let row = |v: &[f64]| Tensor::row(v.to_vec()).expect("non-empty scaler");
        tensors.push(("scaler.mean".into(), row(&scaler.mean)));
        tensors.push(("scaler.sd".into(), row(&scaler.sd)));
        tensors.push(("templates.mdd".into(), templates.mdd.clone()));
        tensors.push(("templates.hc".into(), templates.hc.clone()));
        tensors.push(("meta.tau".into(), Tensor::scalar(tau)));
        tensors.push(("meta.epoch".into(), Tensor::scalar(epoch as f64)));
        Checkpoint { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("checkpoint has no record `{name}`")))
    }

    /// Overwrites every parameter of `model`; shapes must match exactly.
    pub fn restore_params(&self, model: &mut Model) -> Result<()> {
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (id, name) in model.params.ids().collect::<Vec<_>>().into_iter().zip(names) {
            let t = self.get(&format!("param/{name}"))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Adam moments and step count, if stored.
    pub fn optimizer(&self, model: &Model, config: autograd::AdamConfig) -> Result<Option<OptimizerState>> {
        let Ok(step) = self.get("adam.step") else {
            return Ok(None);
        };
        let mut state = OptimizerState::new(config, &model.params);
        state.step = step.item() as u64;
        for (k, (name, _)) in model.params.iter().enumerate() {
            state.first[k] = self.get(&format!("adam.m/{name}"))?.clone();
            state.second[k] = self.get(&format!("adam.v/{name}"))?.clone();
        }
        Ok(Some(state))
    }

    pub fn scaler(&self) -> Result<Scaler> {
        Ok(Scaler {
            mean: self.get("scaler.mean")?.data().to_vec(),
            sd: self.get("scaler.sd")?.data().to_vec(),
        })
    }

    /// Templates without member ids (those live in the split record).
    pub fn templates(&self) -> Result<GroupTemplates> {
        Ok(GroupTemplates {
            mdd: self.get("templates.mdd")?.clone(),
            hc: self.get("templates.hc")?.clone(),
            members: Vec::new(),
        })
    }

    pub fn tau(&self) -> Result<f64> {
        Ok(self.get("meta.tau")?.item())
    }

    pub fn epoch(&self) -> Result<usize> {
        Ok(self.get("meta.epoch")?.item() as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not a checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Data(format!("checkpoint record name at byte {} is not UTF-8", r.pos)))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Data(format!("checkpoint record {name}: dims overflow")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Data(format!("checkpoint record {name}: too large")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Data(format!("checkpoint record {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("checkpoint has {} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
