//! Binary checkpoint files holding the named parameter tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TDCK"  magic
//! u32     format version (currently 1)
//! u64     tensor count
//! then per tensor:
//!   u64       name length in bytes
//!   [u8]      UTF-8 name
//!   u64       rank
//!   [u64]     dims
//!   [f32 LE]  values, C order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterStore};

const MAGIC: &[u8; 4] = b"TDCK";
const VERSION: u32 = 1;

/// Writes every parameter tensor of the store to `path`.
pub fn save(path: &Path, params: &ParameterStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, tensor) in params.entries() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.dims().len() as u64).to_le_bytes())?;
        for &d in tensor.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the named tensors back without interpreting them.
pub fn load_raw(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, not a checkpoint file",
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u64(&mut r)? as usize;
    if count > 10_000 {
        return Err(Error::Format(format!("implausible tensor count {count}")));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let n: usize = dims.iter().product();
        if n > 100_000_000 {
            return Err(Error::Format(format!("implausible tensor size {n}")));
        }
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::from_vec(&dims, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(entries)
}

/// Loads a checkpoint and validates it against `config`.
pub fn load_model(path: &Path, config: ModelConfig) -> Result<Model> {
    let entries = load_raw(path)?;
    let params = ParameterStore::from_entries(&config, entries)?;
    Model::from_parts(config, params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
