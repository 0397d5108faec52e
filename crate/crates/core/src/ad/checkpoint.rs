//! `PSTA` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PSTA"  u32 version
//! u32 header_len  header bytes (UTF-8 flat key=value text)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u8 dtype(4|8)  u32 ndim  u64 dims[ndim]  raw values
//! ```

use std::path::Path;

use thiserror::Error;

use super::adam::{AdamConfig, AdamState, MomentSlot};
use super::params::ParamStore;
use super::scalar::{DType, Scalar};
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSTA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a PSTA checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint contains invalid UTF-8 in {0}")]
    Utf8(&'static str),
    #[error("tensor '{name}': unknown dtype tag {tag}")]
    DTypeTag { name: String, tag: u8 },
    #[error("tensor '{name}' is {found:?}, expected {expected:?}")]
    DTypeMismatch {
        name: String,
        found: DType,
        expected: DType,
    },
    #[error("tensor '{0}' missing from checkpoint")]
    Missing(String),
    #[error("tensor '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{0} trailing bytes after last tensor")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub header: String,
    pub entries: Vec<CheckpointEntry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(header: impl Into<String>) -> Self {
        Self {
            header: header.into(),
            entries: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(tensor.numel() * T::DTYPE.width());
        tensor.data().iter().for_each(|v| v.write_le(&mut bytes));
        self.entries.push(CheckpointEntry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: tensor.shape().to_vec(),
            bytes,
        });
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        let e = self
            .entry(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        if e.dtype != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                name: name.to_string(),
                found: e.dtype,
                expected: T::DTYPE,
            });
        }
        let data = e
            .bytes
            .chunks_exact(e.dtype.width())
            .map(T::read_le)
            .collect();
        Ok(Tensor::new(e.shape.clone(), data).expect("validated on read"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::Magic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = r.u32("header length")? as usize;
        let header = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| CheckpointError::Utf8("header"))?
            .to_string();
        let count = r.u32("tensor count")?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| CheckpointError::Utf8("tensor name"))?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::DTypeTag {
                name: name.clone(),
                tag,
            })?;
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dims")? as usize);
            }
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel * dtype.width(), "tensor values")?.to_vec();
            entries.push(CheckpointEntry {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Trailing(buf.len() - r.pos));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&buf)
    }

    /// Every parameter and buffer under its own name.
    pub fn push_params<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for e in store.entries() {
            self.push(e.name.clone(), &e.value);
        }
    }

    /// Overwrites every entry of `store` from same-named tensors.
    pub fn load_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self.tensor::<T>(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    found: t.shape().to_vec(),
                    expected: store.get(id).shape().to_vec(),
                });
            }
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn push_adam<T: Scalar>(&mut self, adam: &AdamState<T>, store: &ParamStore<T>) {
        let c = adam.config;
        let meta = Tensor::<f64>::new(
            vec![5],
            vec![adam.step as f64, c.lr, c.beta1, c.beta2, c.eps],
        )
        .expect("shape");
        self.push("adam.state", &meta);
        for slot in &adam.slots {
            let name = store.name(slot.param);
            self.push(format!("adam.m.{name}"), &slot.m);
            self.push(format!("adam.v.{name}"), &slot.v);
        }
    }

    pub fn load_adam<T: Scalar>(
        &self,
        store: &ParamStore<T>,
    ) -> Result<AdamState<T>, CheckpointError> {
        let meta = self.tensor::<f64>("adam.state")?;
        let (s, d) = (meta.shape().to_vec(), meta.data());
        if d.len() != 5 {
            return Err(CheckpointError::ShapeMismatch {
                name: "adam.state".into(),
                found: s,
                expected: vec![5],
            });
        }
        let config = AdamConfig {
            lr: d[1],
            beta1: d[2],
            beta2: d[3],
            eps: d[4],
        };
        let mut slots = Vec::new();
        for id in store.trainable_ids() {
            let name = store.name(id);
            slots.push(MomentSlot {
                param: id,
                m: self.tensor(&format!("adam.m.{name}"))?,
                v: self.tensor(&format!("adam.v.{name}"))?,
            });
        }
        Ok(AdamState {
            config,
            step: d[0] as u64,
            slots,
        })
    }
}
