//! Versioned checkpoint archive: every weight keyed by module path plus the
//! model spec, in one little-endian binary file.
//!
//! Layout: magic `CSEG`, u32 version, u64 spec-JSON length, spec JSON bytes,
//! u64 entry count, then per entry: u64 name length, name bytes, u32 rank,
//! u64 dims, f64 data.

use crate::error::{Error, Result};
use crate::grad::Params;
use crate::model::ModelSpec;
use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CSEG";
pub const VERSION: u32 = 1;

pub fn save(path: &Path, spec: &ModelSpec, params: &Params) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let spec_json = serde_json::to_vec(spec)?;
    w.write_all(&(spec_json.len() as u64).to_le_bytes())?;
    w.write_all(&spec_json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for id in params.ids() {
        let entry = params.entry(id);
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        let shape = entry.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in entry.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_exact_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub struct Checkpoint {
    pub spec: ModelSpec,
    pub weights: Vec<(String, ArrayD<f64>)>,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_exact_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let spec_len = read_exact_u64(&mut r)? as usize;
    let mut spec_buf = vec![0u8; spec_len];
    r.read_exact(&mut spec_buf)?;
    let spec: ModelSpec = serde_json::from_slice(&spec_buf)?;
    let count = read_exact_u64(&mut r)? as usize;
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_exact_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("non-UTF8 weight name".into()))?;
        let rank = read_exact_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_exact_u64(&mut r)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = vec![0.0f64; numel];
        for v in data.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        weights.push((
            name,
            ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Checkpoint(format!("bad weight shape: {e}")))?,
        ));
    }
    Ok(Checkpoint { spec, weights })
}

/// Overwrites `params` (built for the same spec) with the stored weights.
/// Every stored weight must exist with a matching shape, and every parameter
/// must be covered.
pub fn restore_into(params: &mut Params, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.weights.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} weights, model has {} parameters",
            ckpt.weights.len(),
            params.len()
        )));
    }
    for (name, value) in &ckpt.weights {
        let id = params
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("weight {name} not in model")))?;
        if params.value(id).shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "weight {name}: checkpoint shape {:?} vs model {:?}",
                value.shape(),
                params.value(id).shape()
            )));
        }
        params.set_value(id, value.clone());
    }
    Ok(())
}
