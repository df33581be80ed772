//! Binary model checkpoints.
//!
//! Layout (little endian): magic `MMFFCKPT`, `u32` version, `u8` stage,
//! `u32` class count, `u64` length plus the TOML config snapshot, `u32`
//! tensor count, then per tensor a `u32`-prefixed name, `u32` rank, `u64`
//! dims and `f64` values.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Model, HEADS};
use crate::output::write_atomic;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMFFCKPT";
pub const VERSION: u32 = 1;

/// A trained model's parameters with the config that built it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Last completed training stage (1 to 3).
    pub stage: u8,
    pub classes: usize,
    pub config: RunConfig,
    pub params: ParamStore,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 text".into()))
    }
}

impl Checkpoint {
    /// Snapshot after `stage`. Stage-1 checkpoints drop the temporary heads.
    pub fn from_model(model: &Model, config: &RunConfig, stage: u8) -> Self {
        let params = if stage <= 1 {
            model.store.without_prefix(HEADS)
        } else {
            model.store.subset(&[""])
        };
        let mut config = config.clone();
        config.model = model.config.clone();
        Self {
            stage,
            classes: model.classes,
            config,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let toml = self.config.to_toml()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(toml.len() as u64).to_le_bytes());
        out.extend_from_slice(toml.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let stage = r.u8()?;
        if !(1..=3).contains(&stage) {
            return Err(Error::Checkpoint(format!("stage {stage} outside 1..=3")));
        }
        let classes = r.u32()? as usize;
        let len = r.u64()? as usize;
        let config = RunConfig::from_toml(&r.str(len)?)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.str(n)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| Ok(r.u64()? as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if params.id(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.add(name, Tensor::new(&shape, data)?);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            stage,
            classes,
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn require_stage(&self, required: u8) -> Result<()> {
        if self.stage < required {
            return Err(Error::StageMismatch {
                found: self.stage,
                required,
            });
        }
        Ok(())
    }

    /// Rebuilds the model from the config snapshot and loads the stored weights.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.model, self.classes, self.config.seed)?;
        let copied = model.store.load_from(&self.params)?;
        if copied != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} of {} stored tensors match the model",
                copied,
                self.params.len()
            )));
        }
        Ok(model)
    }
}
