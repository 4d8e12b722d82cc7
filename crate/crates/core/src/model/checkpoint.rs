//! Binary checkpoint: `MCRD1`, a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in [`ModelParams::tensors`]
//! order.

use super::{Linear, ModelParams, Similarity};
use crate::numerics::Tensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MCRD1";
const MAX_HEADER: u64 = 1 << 30;

#[derive(Serialize, Deserialize)]
struct Header {
    n_items: usize,
    k: usize,
    d: usize,
    tau: f64,
    sigma0: f64,
    hidden_sizes: Vec<usize>,
    similarity: Similarity,
    items: Vec<String>,
}

pub fn write_checkpoint(w: &mut impl Write, params: &ModelParams, items: &[String]) -> Result<()> {
    params.validate()?;
    if items.len() != params.n_items() {
        return Err(Error::Format(format!(
            "{} item ids for {} item rows",
            items.len(),
            params.n_items()
        )));
    }
    let header = serde_json::to_vec(&Header {
        n_items: params.n_items(),
        k: params.k(),
        d: params.d(),
        tau: params.tau,
        sigma0: params.sigma0,
        hidden_sizes: params.hidden_sizes(),
        similarity: params.similarity,
        items: items.to_vec(),
    })?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for t in params.tensors() {
        let mut buf = Vec::with_capacity(4 * t.len());
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(ModelParams, Vec<String>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Format(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)?;
    let h: Header = serde_json::from_slice(&header)?;
    if h.items.len() != h.n_items {
        return Err(Error::Format("item vocabulary length mismatch".into()));
    }
    let mut read = |rows: usize, cols: usize| -> Result<Tensor> {
        let mut buf = vec![0u8; 4 * rows * cols];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated tensor data".into()))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(rows, cols, data)
    };
    let prototypes = read(h.k, h.d)?;
    let item_reps = read(h.n_items, h.d)?;
    let context_reps = read(h.n_items, h.d)?;
    let mut dims = vec![h.d];
    dims.extend(&h.hidden_sizes);
    dims.push(2 * h.d);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        layers.push(Linear {
            weight: read(w[0], w[1])?,
            bias: read(1, w[1])?,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensors".into()));
    }
    let params = ModelParams {
        prototypes,
        item_reps,
        context_reps,
        layers,
        tau: h.tau,
        sigma0: h.sigma0,
        similarity: h.similarity,
    };
    params.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok((params, h.items))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, items: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params, items)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Vec<String>)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
