//! Binary parameter checkpoints.
//!
//! Layout (little endian):
//! `b"CCNETPV\0"`, u32 version, u64 spec digest, u32 block count, then per
//! block: u32 layer, u16 name length + UTF-8 name, u64 offset, u32 rank,
//! rank x u64 dims; then u64 value count and the raw f64 values.

use std::io::{Read, Write};

use super::{ModelSpec, ParamBlock, ParamVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CCNETPV\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec_digest: u64,
    pub params: ParamVector,
}

pub fn write_checkpoint<W: Write>(mut w: W, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    if spec.param_count() != params.len() {
        return Err(Error::invalid("parameters do not match the spec"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&spec.digest().to_le_bytes())?;
    w.write_all(&(params.layout.len() as u32).to_le_bytes())?;
    for b in &params.layout {
        w.write_all(&(b.layer as u32).to_le_bytes())?;
        w.write_all(&(b.name.len() as u16).to_le_bytes())?;
        w.write_all(b.name.as_bytes())?;
        w.write_all(&(b.offset as u64).to_le_bytes())?;
        w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
        for d in &b.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
    }
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_n<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_n(r)?))
}

fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_n(r)?))
}

/// Read a checkpoint; when `spec` is given its digest and layout must match.
pub fn read_checkpoint<R: Read>(mut r: R, spec: Option<&ModelSpec>) -> Result<Checkpoint> {
    let magic: [u8; 8] = read_n(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter checkpoint".into()));
    }
    let version = u32_of(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let digest = u64_of(&mut r)?;
    let blocks = u32_of(&mut r)? as usize;
    let mut layout = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let layer = u32_of(&mut r)? as usize;
        let name_len = u16::from_le_bytes(read_n(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
        let offset = u64_of(&mut r)? as usize;
        let rank = u32_of(&mut r)? as usize;
        let shape = (0..rank).map(|_| u64_of(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        layout.push(ParamBlock { layer, name, offset, shape });
    }
    let n = u64_of(&mut r)? as usize;
    let expected: usize = layout.iter().map(ParamBlock::size).sum();
    if n != expected {
        return Err(Error::Format(format!("value count {n} disagrees with layout size {expected}")));
    }
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(f64::from_le_bytes(read_n(&mut r)?));
    }
    if let Some(spec) = spec {
        if spec.digest() != digest || spec.layout() != layout {
            return Err(Error::Format("checkpoint was written for a different architecture".into()));
        }
    }
    Ok(Checkpoint { spec_digest: digest, params: ParamVector { values, layout } })
}
