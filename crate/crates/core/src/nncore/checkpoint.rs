//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "T2TPARAM" | u32 version | u64 header_len | header JSON
//! u64 param_count
//! per param: u32 name_len | name | u8 is_gain_or_bias | u32 ndim | u64 dims.. | f64 values..
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a load reproduces the saved
//! registry exactly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::params::ParamRegistry;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"T2TPARAM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub seed: u64,
}

pub fn write_params<W: Write>(w: &mut W, header: &CheckpointHeader, params: &ParamRegistry) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (_, name, p) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(p.is_gain_or_bias)])?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.tensor.len() * 8);
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bounded(n: u64, limit: u64, what: &str) -> Result<usize> {
    if n > limit {
        return Err(Error::Checkpoint(format!("{what} of {n} exceeds limit {limit}")));
    }
    Ok(n as usize)
}

pub fn read_params<R: Read>(r: &mut R) -> Result<(CheckpointHeader, ParamRegistry)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a parameter file".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = bounded(read_u64(r)?, 1 << 20, "header length")?;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
    let count = bounded(read_u64(r)?, 1 << 20, "parameter count")?;
    let mut params = ParamRegistry::new();
    for _ in 0..count {
        let nlen = bounded(read_u32(r)?.into(), 4096, "name length")?;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndim = bounded(read_u32(r)?.into(), 8, "rank")?;
        let shape = (0..ndim)
            .map(|_| read_u64(r).and_then(|d| bounded(d, 1 << 32, "dimension")))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let n = bounded(n as u64, 1 << 31, "tensor size")?;
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        params.register(name, Tensor::new(shape, data)?, flag[0] != 0)?;
    }
    Ok((header, params))
}
