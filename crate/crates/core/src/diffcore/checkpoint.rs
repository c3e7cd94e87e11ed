//! "NCK1" parameter container.
//!
//! Layout (little-endian): magic `NCK1`, `u32` entry count, then per entry
//! `u32` path length, UTF-8 path, `u32` rank, `u32` dims, `f32` payload.
//! Optimizer moments live under `opt/m/<path>` and `opt/v/<path>`, per-tensor
//! update counts under `opt/t/<path>`, the step counter under `opt/step`.

use std::io::{Read, Write};

use super::optim::OptimizerState;
use super::params::ParameterSet;
use super::tensor::Tensor;
use super::DiffError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NCK1";
const OPT_M: &str = "opt/m/";
const OPT_V: &str = "opt/v/";
const OPT_T: &str = "opt/t/";
const OPT_STEP: &str = "opt/step";

fn fmt_err(msg: impl Into<String>) -> DiffError {
    DiffError::Format(msg.into())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes `rank, dims, payload` for one tensor.
pub(crate) fn write_tensor_body(w: &mut impl Write, t: &Tensor) -> Result<(), DiffError> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_tensor_body(r: &mut impl Read) -> Result<Tensor, DiffError> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(fmt_err(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let shape = if shape.is_empty() { vec![1] } else { shape };
    Tensor::new(shape, data)
}

/// Serializes parameters and (optionally) optimizer state.
pub fn write_checkpoint(
    w: &mut impl Write,
    params: &ParameterSet,
    opt: Option<&OptimizerState>,
) -> Result<(), DiffError> {
    let mut entries: Vec<(String, Tensor)> = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if let Some(opt) = opt {
        entries.extend(opt.m.iter().map(|(k, v)| (format!("{OPT_M}{k}"), v.clone())));
        entries.extend(opt.v.iter().map(|(k, v)| (format!("{OPT_V}{k}"), v.clone())));
        entries.extend(opt.updates.iter().map(|(k, n)| (format!("{OPT_T}{k}"), Tensor::scalar(*n as f32))));
        entries.push((OPT_STEP.to_string(), Tensor::scalar(opt.step as f32)));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (path, t) in &entries {
        let reserved = [OPT_M, OPT_V, OPT_T].iter().any(|p| path.starts_with(p)) || path == OPT_STEP;
        if path.starts_with("opt/") && !reserved {
            return Err(fmt_err(format!("parameter path {path} collides with reserved prefix opt/")));
        }
        w.write_all(&(path.len() as u32).to_le_bytes())?;
        w.write_all(path.as_bytes())?;
        write_tensor_body(w, t)?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(r: &mut impl Read) -> Result<(ParameterSet, Option<OptimizerState>), DiffError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt_err(format!("bad checkpoint magic {magic:?}")));
    }
    let count = read_u32(r)?;
    let mut params = ParameterSet::new();
    let mut opt = OptimizerState::default();
    let mut has_opt = false;
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut raw = vec![0u8; len];
        r.read_exact(&mut raw)?;
        let path = String::from_utf8(raw).map_err(|_| fmt_err("non UTF-8 parameter path"))?;
        let t = read_tensor_body(r)?;
        if let Some(p) = path.strip_prefix(OPT_M) {
            has_opt = true;
            opt.m.insert(p, t);
        } else if let Some(p) = path.strip_prefix(OPT_V) {
            has_opt = true;
            opt.v.insert(p, t);
        } else if let Some(p) = path.strip_prefix(OPT_T) {
            has_opt = true;
            opt.updates.insert(p.to_string(), t.item() as u64);
        } else if path == OPT_STEP {
            has_opt = true;
            opt.step = t.item() as u64;
        } else if params.insert(path.clone(), t).is_some() {
            return Err(fmt_err(format!("duplicate parameter path {path}")));
        }
    }
    Ok((params, has_opt.then_some(opt)))
}
