//! Single-file checkpoint: config plus named little-endian `f64` arrays.
//!
//! ```text
//! magic      8 bytes  "HWLBCKPT"
//! version    u32
//! config_len u32, then config_len bytes of JSON (ModelConfig)
//! n_params   u32
//! per param (name order):
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, then rank × u64 extents
//!   data     product(extents) × f64
//! ```
//! Every integer and float is little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HWLBCKPT";

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model.config(), model.params())?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    let (cfg, params) = read_checkpoint(&mut bytes.as_slice())?;
    Model::from_parts(cfg, params)
}

pub(crate) fn write_checkpoint(w: &mut impl Write, cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(cfg)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_checkpoint(r: &mut impl Read) -> Result<(ModelConfig, ParamSet)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut json = vec![0u8; read_u32(r)? as usize];
    r.read_exact(&mut json)?;
    let cfg: ModelConfig = serde_json::from_slice(&json)?;
    let n = read_u32(r)?;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let mut name = vec![0u8; read_u32(r)? as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non UTF-8 parameter name".into()))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((cfg, params))
}
