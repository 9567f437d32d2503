//! Parameter checkpoints.
//!
//! `<stem>.bin` holds one block per tensor in layout order. Each block has
//! the same 16-byte header as feature files (`b"STAL"`, version, rows,
//! cols, all little-endian) but version 2 marks an `f64` payload so a
//! save/load cycle is bit-exact. `<stem>.json` records the model config and
//! the name, shape and byte offset of every block.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::corpus::FEATURE_MAGIC;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_VERSION: u32 = 2;
const HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub(crate) fn encode_tensors(tensors: &[Mat]) -> (Vec<u8>, Vec<usize>) {
    let mut buf = Vec::new();
    let mut offsets = Vec::with_capacity(tensors.len());
    for t in tensors {
        offsets.push(buf.len());
        buf.extend_from_slice(&FEATURE_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    (buf, offsets)
}

pub(crate) fn decode_tensor(path: &Path, bytes: &[u8], offset: usize, rows: usize, cols: usize) -> Result<Mat> {
    let block = bytes
        .get(offset..)
        .ok_or_else(|| Error::format(path, format!("offset {offset} past end of file")))?;
    let (r, c) = crate::corpus::io_parse_header(path, block, CHECKPOINT_VERSION)?;
    if (r, c) != (rows, cols) {
        return Err(Error::format(
            path,
            format!("block at {offset} is {r}x{c}, sidecar says {rows}x{cols}"),
        ));
    }
    let payload = block
        .get(HEADER_LEN..HEADER_LEN + 8 * rows * cols)
        .ok_or_else(|| Error::format(path, format!("block at {offset} is truncated")))?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_params(params: &ModelParams, stem: &Path) -> Result<()> {
    let (buf, offsets) = encode_tensors(params.tensors());
    let bin = with_ext(stem, "bin");
    fs::write(&bin, &buf).map_err(|e| Error::io(&bin, e))?;
    let sidecar = Sidecar {
        format: "stepground-params".into(),
        version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .zip(offsets)
            .map(|((name, t), offset)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                offset,
            })
            .collect(),
    };
    let json = with_ext(stem, "json");
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))
}

pub fn load_params(stem: &Path) -> Result<ModelParams> {
    let json = with_ext(stem, "json");
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    if sidecar.version != CHECKPOINT_VERSION {
        return Err(Error::format(&json, format!("unsupported version {}", sidecar.version)));
    }
    let bin = with_ext(stem, "bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut tensors = Vec::with_capacity(sidecar.tensors.len());
    let mut end = 0;
    for t in &sidecar.tensors {
        tensors.push(decode_tensor(&bin, &bytes, t.offset, t.rows, t.cols)?);
        end = end.max(t.offset + HEADER_LEN + 8 * t.rows * t.cols);
    }
    if end != bytes.len() {
        return Err(Error::format(&bin, format!("{} trailing bytes", bytes.len() - end)));
    }
    let params = ModelParams::from_tensors(&sidecar.config, tensors)?;
    for (entry, name) in sidecar.tensors.iter().zip(params.names()) {
        if &entry.name != name {
            return Err(Error::format(
                &json,
                format!("tensor `{}` found where `{name}` was expected", entry.name),
            ));
        }
    }
    Ok(params)
}
