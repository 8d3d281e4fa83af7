//! Named parameters and the binary checkpoint format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "NAFPCKPT"
//! version    u32       1
//! meta_len   u32       byte length of the metadata blob
//! meta       bytes     UTF-8 JSON (model configuration)
//! count      u32       number of parameter records
//! record (repeated `count` times):
//!   name_len u32
//!   name     bytes     UTF-8, e.g. "f.block3.conv_1x3.weight"
//!   ndim     u32
//!   dims     u32 * ndim
//!   values   f32 * prod(dims)
//! ```
//!
//! The file must end exactly after the last record.

use std::collections::HashMap;
use std::path::Path;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NAFPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Frozen parameters get no gradient and are skipped by optimizers.
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::arg(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.to_string(), value, grad, frozen: false });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn checkpoint_bytes(&self, meta: &str) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(meta.len() as u32);
        w.bytes(meta.as_bytes());
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.u32(p.name.len() as u32);
            w.bytes(p.name.as_bytes());
            w.u32(p.value.shape().len() as u32);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            let vals: Vec<f32> = p.value.data().iter().map(|v| v.f64() as f32).collect();
            w.f32s(&vals);
        }
        w.buf
    }

    /// Writes a checkpoint atomically; `meta` is stored verbatim.
    pub fn save_checkpoint(&self, path: &Path, meta: &str) -> Result<()> {
        write_atomic(path, &self.checkpoint_bytes(meta))
    }

    /// Parses a checkpoint. Nothing is returned unless the whole file is valid.
    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<(Self, String)> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.format_err(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = String::from_utf8(r.bytes(meta_len, "metadata")?.to_vec())
            .map_err(|_| r.format_err("metadata is not UTF-8"))?;
        let count = r.u32("record count")?;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.bytes(name_len, "name")?.to_vec())
                .map_err(|_| r.format_err("parameter name is not UTF-8"))?;
            let ndim = r.u32("ndim")? as usize;
            if ndim > 8 {
                return Err(r.format_err(format!("{name}: implausible rank {ndim}")));
            }
            let dims = (0..ndim)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.format_err(format!("{name}: shape overflows")))?;
            let vals = r.f32s(n, "values")?;
            let t = Tensor::new(&dims, vals.into_iter().map(|v| S::of(f64::from(v))).collect())?;
            store.add(&name, t).map_err(|e| r.format_err(e.to_string()))?;
        }
        r.finish()?;
        Ok((store, meta))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}
