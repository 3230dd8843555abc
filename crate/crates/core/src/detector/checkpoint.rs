//! Self-describing parameter archives.
//!
//! Layout: the 8-byte magic `LADACKPT`, a little-endian `u64` header length,
//! a JSON header (config, strides, widths, tensor index, update counters),
//! then every tensor's values as little-endian `f64` in index order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::DetectorConfig;
use super::params::DetectorParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LADACKPT";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    strides: Vec<usize>,
    backbone_widths: Vec<usize>,
    fpn_channels: usize,
    tensors: Vec<TensorEntry>,
    grad_updates: u64,
    ema_updates: u64,
}

pub fn save_checkpoint(params: &DetectorParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = params.config();
    let header = Header {
        config: cfg.clone(),
        strides: cfg.strides.clone(),
        backbone_widths: cfg.backbone_widths.clone(),
        fpn_channels: cfg.fpn_channels,
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        grad_updates: params.grad_updates(),
        ema_updates: params.ema_updates(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(io)?;
    out.write_all(&json).map_err(io)?;
    for t in params.tensors() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DetectorParams> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let bad = |m: &str| Error::schema(path.display().to_string(), m);
    let mut inp = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)
        .map_err(|_| bad("truncated checkpoint"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut len = [0u8; 8];
    inp.read_exact(&mut len)
        .map_err(|_| bad("truncated checkpoint"))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(bad("implausible header length"));
    }
    let mut json = vec![0u8; len];
    inp.read_exact(&mut json)
        .map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(&e.to_string()))?;
    let mut names = Vec::with_capacity(header.tensors.len());
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            inp.read_exact(&mut buf)
                .map_err(|_| bad("truncated tensor data"))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::new(&e.shape, data)?);
        names.push(e.name);
    }
    if inp.read(&mut buf).map_err(io)? != 0 {
        return Err(bad("trailing bytes after tensor data"));
    }
    let mut params = DetectorParams::from_parts(header.config, names, tensors)?;
    params.set_counters(header.grad_updates, header.ema_updates);
    Ok(params)
}
