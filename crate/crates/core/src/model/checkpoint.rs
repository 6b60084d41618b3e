//! `LMC1` checkpoint files.
//!
//! ```text
//! "LMC1" | version u32 | config_len u32 | config JSON
//!        | n_tensors u32 | per tensor: name_len u16, name, rank u8, dims u32.., f32 data
//!        | has_opt u8 | [step u64 | m f32 x total | v f32 x total]
//! ```

use std::path::Path;

use crate::binio::{read_file, write_file, LeReader, LeWriter};
use crate::error::{Error, Result};

use super::params::{LmConfig, LmParams, ParamLayout};

const MAGIC: &[u8; 4] = b"LMC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmCheckpoint {
    pub params: LmParams<f32>,
    pub optimizer: Option<OptimizerState>,
}

impl LmCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let config = serde_json::to_vec(&p.config)?;
        let mut w = LeWriter::new();
        w.bytes(MAGIC)
            .u32(CHECKPOINT_VERSION)
            .u32(config.len() as u32)
            .bytes(&config)
            .u32(p.layout.tensors.len() as u32);
        for t in &p.layout.tensors {
            w.u16(t.name.len() as u16).bytes(t.name.as_bytes()).u8(t.shape.len() as u8);
            for &s in &t.shape {
                w.u32(s as u32);
            }
            w.f32s(p.data[t.range()].iter().copied());
        }
        match &self.optimizer {
            None => {
                w.u8(0);
            }
            Some(o) => {
                if o.m.len() != p.data.len() || o.v.len() != p.data.len() {
                    return Err(Error::Model("optimizer state does not match parameter count".into()));
                }
                w.u8(1).u64(o.step).f32s(o.m.iter().copied()).f32s(o.v.iter().copied());
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = LeReader::new(bytes, path);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let clen = r.u32()? as usize;
        let config: LmConfig = serde_json::from_slice(r.take(clen)?)
            .map_err(|e| Error::format(path, format!("config echo: {e}")))?;
        config.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let layout = ParamLayout::new(&config);
        let n = r.u32()? as usize;
        if n != layout.tensors.len() {
            return Err(r.error(format!("{n} tensors, config implies {}", layout.tensors.len())));
        }
        let mut data = vec![0.0f32; layout.total];
        for t in &layout.tensors {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8_lossy(r.take(nlen)?).into_owned();
            if name != t.name {
                return Err(r.error(format!("tensor `{name}` where `{}` expected", t.name)));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if shape != t.shape {
                return Err(r.error(format!("tensor `{name}` has shape {shape:?}, expected {:?}", t.shape)));
            }
            data[t.range()].copy_from_slice(&r.f32s(t.len())?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = r.f32s(layout.total)?;
                let v = r.f32s(layout.total)?;
                Some(OptimizerState { step, m, v })
            }
            other => return Err(r.error(format!("bad optimizer flag {other}"))),
        };
        r.finish()?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(path, "non-finite parameter"));
        }
        Ok(LmCheckpoint {
            params: LmParams { config, layout, data },
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
