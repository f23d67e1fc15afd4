//! Binary checkpoint: header, config hash, step, group spec, then named
//! little-endian tensors (parameters followed by optimizer moments).

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, PipelineError};
use crate::tensor::{NdValue, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model hash of the config the run was started with, as raw bytes.
    pub config_hash: [u8; 32],
    pub step: u64,
    /// Optimizer step counter.
    pub optim_step: u64,
    /// Label groups in key-value form.
    pub groups: String,
    pub tensors: Vec<(String, NdValue)>,
}

fn hex_to_bytes(hex: &str) -> Result<[u8; 32], PipelineError> {
    let bad = || PipelineError::Checkpoint(format!("bad config hash {hex:?}"));
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

pub fn file_sha256(path: &Path) -> Result<[u8; 32], PipelineError> {
    Ok(Sha256::digest(std::fs::read(path)?).into())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| PipelineError::Checkpoint("truncated file".into()))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PipelineError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PipelineError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String, PipelineError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| PipelineError::Checkpoint("name is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn capture(model: &Model, state: &OptimizerState, step: u64) -> Result<Self, PipelineError> {
        let store = &model.store;
        let mut tensors: Vec<(String, NdValue)> =
            store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect();
        for (id, (m, v)) in store.ids().zip(state.first.iter().zip(&state.second)) {
            tensors.push((format!("optim.m.{}", store.name(id)), m.clone()));
            tensors.push((format!("optim.v.{}", store.name(id)), v.clone()));
        }
        Ok(Self {
            config_hash: hex_to_bytes(&model.cfg.model_hash())?,
            step,
            optim_step: state.step,
            groups: model.groups.to_kv(),
            tensors,
        })
    }

    pub fn hash_hex(&self) -> String {
        self.config_hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn matches(&self, model_hash: &str) -> bool {
        self.hash_hex() == model_hash
    }

    fn get(&self, name: &str) -> Option<&NdValue> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Copies parameters and moments into `model` and `state`; every
    /// parameter must be present with its shape.
    pub fn restore(&self, model: &mut Model, state: &mut OptimizerState) -> Result<(), PipelineError> {
        let ids: Vec<_> = model.store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let name = model.store.name(id).to_string();
            let fetch = |key: String, shape: &[usize]| -> Result<NdValue, PipelineError> {
                let v = self.get(&key).ok_or_else(|| PipelineError::Checkpoint(format!("missing tensor {key}")))?;
                if v.shape() != shape {
                    return Err(PipelineError::Checkpoint(format!("{key}: shape {:?}, model wants {shape:?}", v.shape())));
                }
                Ok(v.clone())
            };
            let shape = model.store.value(id).shape().to_vec();
            *model.store.value_mut(id) = fetch(name.clone(), &shape)?;
            state.first[i] = fetch(format!("optim.m.{name}"), &shape)?;
            state.second[i] = fetch(format!("optim.v.{name}"), &shape)?;
        }
        state.step = self.optim_step;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.optim_step.to_le_bytes());
        b.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        b.extend_from_slice(self.groups.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, v) in &self.tensors {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(DTYPE_F64);
            b.push(v.shape().len() as u8);
            for &d in v.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in v.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, PipelineError> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(PipelineError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PipelineError::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let optim_step = r.u64()?;
        let glen = r.u32()? as usize;
        let groups = r.string(glen)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = r.string(nlen)?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(PipelineError::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| PipelineError::Checkpoint("tensor too large".into()))?)?;
            let vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, NdValue::new(shape, vals)?));
        }
        if r.pos != data.len() {
            return Err(PipelineError::Checkpoint(format!("{} trailing bytes", data.len() - r.pos)));
        }
        Ok(Self { config_hash, step, optim_step, groups, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        // Write-then-rename so an interrupted write never leaves a torn file.
        let tmp = path.with_extension("ock.tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, PipelineError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
