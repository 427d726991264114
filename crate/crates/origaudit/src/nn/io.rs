//! Checkpoint serialization and weight fingerprints.
//!
//! Weights are stored in a small binary format: entries sorted by parameter
//! name, each as `name_len:u32 | name | ndim:u32 | dims:u64* | data:f64*`,
//! all little-endian. The same canonical byte stream feeds the SHA-256
//! fingerprint, so a fingerprint is stable across save/load round trips and
//! any weight mutation changes it.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::layers::Param;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"OAW1";

/// Canonical byte encoding of a parameter set (sorted by name).
pub fn canonical_bytes(params: &[Param]) -> Vec<u8> {
    let mut sorted: Vec<&Param> = params.iter().collect();
    sorted.sort_by_key(|p| p.name());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for p in sorted {
        let name = p.name();
        let value = p.value();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for d in value.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// SHA-256 hex digest over one or more parameter groups (in order).
pub fn fingerprint_hex(groups: &[&[Param]]) -> String {
    let mut hasher = Sha256::new();
    for group in groups {
        hasher.update(canonical_bytes(group));
    }
    hex::encode(hasher.finalize())
}

pub fn save_params(path: &Path, params: &[Param]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, canonical_bytes(params)).map_err(|e| Error::io(path, e))
}

/// Loads weights saved by [`save_params`] into matching parameters (by
/// name; shapes must agree; the file must cover exactly the given set).
pub fn load_params(path: &Path, params: &[Param]) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "{}: truncated at byte {}",
                path.display(),
                *cursor
            )));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let magic = take(&mut cursor, 4)?;
    if magic != MAGIC {
        return Err(Error::CheckpointFormat(format!("{}: bad magic", path.display())));
    }
    let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let mut loaded: std::collections::HashMap<String, ArrayD<f64>> =
        std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| Error::CheckpointFormat(format!("{}: bad name", path.display())))?;
        let ndim = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut cursor, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.insert(name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap());
    }
    if loaded.len() != params.len() {
        return Err(Error::CheckpointFormat(format!(
            "{}: holds {} tensors, model expects {}",
            path.display(),
            loaded.len(),
            params.len()
        )));
    }
    for p in params {
        let name = p.name();
        let value = loaded.remove(&name).ok_or_else(|| {
            Error::CheckpointFormat(format!("{}: missing tensor {name}", path.display()))
        })?;
        if value.shape() != p.value().shape() {
            return Err(Error::CheckpointFormat(format!(
                "{}: tensor {name} has shape {:?}, model expects {:?}",
                path.display(),
                value.shape(),
                p.value().shape()
            )));
        }
        p.set(value);
    }
    Ok(())
}
