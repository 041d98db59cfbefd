//! Binary checkpoints.
//!
//! All integers little-endian.
//!
//! ```text
//! magic        8 bytes  "GACECKPT"
//! version      u32      currently 1
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 TOML (CheckpointMeta)
//! n_params     u32
//!   name_len   u32, name bytes
//!   ndim       u32, dims as u64 × ndim
//!   data       f64 × prod(dims)
//! has_adam     u8
//!   step       u64
//!   per param, in the order above: steps u64, then m, v, v_max as f64 × len
//! n_records    u32
//!   episode    u64
//!   label      u32
//!   ndim       u32, dims as u64 × ndim
//!   data       f64 × prod(dims)
//! ```

use std::io::{self, Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::goal_storage::GoalRecord;
use crate::nets::{GoalModel, ModelConfig};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, ParamMoments, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"GACECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error("checkpoint parameter {name}: {reason}")]
    Mismatch { name: String, reason: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: String,
    pub seed: u64,
    pub updates: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub adam_lr: f64,
    pub adam_amsgrad: bool,
    pub model: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    pub records: Vec<GoalRecord>,
}

impl Checkpoint {
    /// Fresh model with the stored weights.
    pub fn model(&self) -> Result<GoalModel, CheckpointError> {
        let mut m = GoalModel::new(self.meta.model.clone(), &mut rng::from_seed(0))
            .map_err(|e| CheckpointError::Meta(e.to_string()))?;
        load_params(&mut m.params, &self.params)?;
        Ok(m)
    }
}

/// Copies `src` into `dst` by name, checking that the layouts agree exactly.
pub fn load_params(dst: &mut ParamStore, src: &ParamStore) -> Result<(), CheckpointError> {
    if dst.len() != src.len() {
        return Err(CheckpointError::Mismatch {
            name: "*".into(),
            reason: format!("model has {} parameters, checkpoint {}", dst.len(), src.len()),
        });
    }
    for id in dst.ids().collect::<Vec<_>>() {
        let name = dst.name(id).to_string();
        let sid = src.find(&name).ok_or_else(|| CheckpointError::Mismatch {
            name: name.clone(),
            reason: "missing from checkpoint".into(),
        })?;
        let s = src.get(sid);
        if s.shape() != dst.get(id).shape() {
            return Err(CheckpointError::Mismatch {
                reason: format!("shape {:?} vs {:?}", dst.get(id).shape(), s.shape()),
                name,
            });
        }
        dst.get_mut(id).data_mut().copy_from_slice(s.data());
    }
    Ok(())
}

fn put_u32(w: &mut impl Write, x: u32) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_u64(w: &mut impl Write, x: u64) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn put_tensor(w: &mut impl Write, t: &Tensor) -> io::Result<()> {
    put_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        put_u64(w, d as u64)?;
    }
    put_f64s(w, t.data())
}

pub fn write(
    w: &mut impl Write,
    meta: &CheckpointMeta,
    params: &ParamStore,
    adam: Option<&Adam>,
    records: &[&GoalRecord],
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let text = toml::to_string(meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    put_u32(w, text.len() as u32)?;
    w.write_all(text.as_bytes())?;
    put_u32(w, params.len() as u32)?;
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        put_u32(w, name.len() as u32)?;
        w.write_all(name)?;
        put_tensor(w, params.get(id))?;
    }
    match adam {
        None => w.write_all(&[0])?,
        Some(a) => {
            w.write_all(&[1])?;
            put_u64(w, a.steps())?;
            for m in a.moments_all() {
                put_u64(w, m.steps)?;
                put_f64s(w, &m.m)?;
                put_f64s(w, &m.v)?;
                put_f64s(w, &m.v_max)?;
            }
        }
    }
    put_u32(w, records.len() as u32)?;
    for r in records {
        put_u64(w, r.episode)?;
        put_u32(w, r.label as u32)?;
        put_tensor(w, &r.state)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, CheckpointError> {
        let mut b = vec![0; n];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let ndim = self.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(CheckpointError::Corrupt(format!("tensor rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64()? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n > 0 && n < 1 << 32).ok_or_else(|| CheckpointError::Corrupt(format!("dims {dims:?}")))?;
        let data = self.f64s(n)?;
        Tensor::new(dims, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

pub fn read(r: impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { inner: r };
    if r.bytes(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()? as usize;
    let text = String::from_utf8(r.bytes(len)?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| CheckpointError::Meta(e.to_string()))?;

    // Groups come from the model layout, so parameters are rebuilt through it.
    let template = GoalModel::new(meta.model.clone(), &mut rng::from_seed(0))
        .map_err(|e| CheckpointError::Meta(e.to_string()))?;
    let mut params = template.params.clone();
    let n = r.u32()? as usize;
    if n != params.len() {
        return Err(CheckpointError::Mismatch {
            name: "*".into(),
            reason: format!("model config implies {} parameters, file has {n}", params.len()),
        });
    }
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let t = r.tensor()?;
        let id = params.find(&name).ok_or_else(|| CheckpointError::Mismatch {
            name: name.clone(),
            reason: "not part of the model".into(),
        })?;
        if params.get(id).shape() != t.shape() {
            return Err(CheckpointError::Mismatch {
                reason: format!("shape {:?} vs {:?}", params.get(id).shape(), t.shape()),
                name,
            });
        }
        *params.get_mut(id) = t;
        order.push(id);
    }
    let adam = if r.u8()? == 1 {
        let step = r.u64()?;
        let mut moments = vec![None; n];
        for &id in &order {
            let len = params.get(id).len();
            let steps = r.u64()?;
            moments[id.index()] = Some(ParamMoments {
                steps,
                m: r.f64s(len)?,
                v: r.f64s(len)?,
                v_max: r.f64s(len)?,
            });
        }
        let config = AdamConfig {
            lr: meta.adam_lr,
            amsgrad: meta.adam_amsgrad,
            ..AdamConfig::default()
        };
        Some(Adam::from_parts(config, moments.into_iter().map(|m| m.expect("every id once")).collect(), step))
    } else {
        None
    };
    let n_rec = r.u32()? as usize;
    let mut records = Vec::with_capacity(n_rec);
    for _ in 0..n_rec {
        let episode = r.u64()?;
        let label = r.u32()? as usize;
        let state = Arc::new(r.tensor()?);
        records.push(GoalRecord { state, label, episode });
    }
    Ok(Checkpoint {
        meta,
        params,
        adam,
        records,
    })
}

pub fn save(path: &std::path::Path, meta: &CheckpointMeta, params: &ParamStore, adam: Option<&Adam>, records: &[&GoalRecord]) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = io::BufWriter::new(std::fs::File::create(&tmp)?);
        write(&mut f, meta, params, adam, records)?;
        f.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint, CheckpointError> {
    read(io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic() {
        let err = read(&b"NOTACKPT\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
    }
}
