//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"EHRSEQCK"            8 bytes
//! version: u32           currently 1
//! header_len: u64
//! header: JSON           header_len bytes, UTF-8
//! values: f32 × Σ|p|     one block per parameter, in header order
//! ```
//!
//! The header holds `model_kind`, `hyperparameters`, `vocab_hash`,
//! `params` (a list of `{name, shape}`) and a free-form `extra` object.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EHRSEQCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_kind: String,
    pub hyperparameters: serde_json::Value,
    pub vocab_hash: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn to_bytes(header: &CheckpointHeader, params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut header = header.clone();
    header.params = params
        .iter()
        .map(|p| ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, ParamSet<f32>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut rest = &bytes[20 + hlen..];
    let mut params = ParamSet::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        if rest.len() < 4 * n {
            return Err(Error::Checkpoint(format!("truncated values for {}", entry.name)));
        }
        let data = rest[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        rest = &rest[4 * n..];
        params.add(entry.name.clone(), Tensor::new(&entry.shape, data)?);
    }
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, params))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &ParamSet<f32>) -> Result<()> {
    let bytes = to_bytes(header, params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamSet<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Copies values into `target` by parameter name, checking shapes.
pub fn restore_into(target: &mut ParamSet<f32>, source: &ParamSet<f32>) -> Result<()> {
    for p in target.iter_mut() {
        let id = source
            .find(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {}", p.name)))?;
        let src = &source.get(id).value;
        if src.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "restore",
                lhs: p.value.shape().to_vec(),
                rhs: src.shape().to_vec(),
            });
        }
        p.value = src.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> CheckpointHeader {
        CheckpointHeader {
            model_kind: "gru".into(),
            hyperparameters: serde_json::json!({"hidden": 4}),
            vocab_hash: "abc".into(),
            params: vec![],
            extra: serde_json::Value::Null,
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.25));
        ps.add("b", Tensor::new(&[1], vec![f32::MIN_POSITIVE]).unwrap());
        let bytes = to_bytes(&header(), &ps).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let (h, back) = from_bytes(&bytes).unwrap();
        assert_eq!(h.params.len(), 2);
        assert_eq!(back.get(back.find("a").unwrap()).value, ps.get(ps.find("a").unwrap()).value);
        assert_eq!(back.get(back.find("b").unwrap()).value.item(), f32::MIN_POSITIVE);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(&[4]));
        let bytes = to_bytes(&header(), &ps).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"NOTACKPT00000000000000").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
