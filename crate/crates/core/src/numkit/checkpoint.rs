//! Single-file checkpoints: one line of compact JSON describing the tensors,
//! then their values as little-endian `f64`, in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

pub const CHECKPOINT_FORMAT: &str = "srmt-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub precision: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(&str, &Tensor)], meta: serde_json::Value) -> Result<(), NumError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        precision: "f64".into(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry { name: (*n).to_string(), shape: t.shape().to_vec() })
            .collect(),
        meta,
    };
    let line = serde_json::to_string(&header).map_err(|e| NumError::Checkpoint(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, NumError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| NumError::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| NumError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.precision != "f64" {
        return Err(NumError::Checkpoint(format!(
            "unsupported checkpoint {} / {}",
            header.format, header.precision
        )));
    }
    let mut off = nl + 1;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = off + n * 8;
        if end > bytes.len() {
            return Err(NumError::Checkpoint(format!("payload truncated at tensor {}", entry.name)));
        }
        let data = bytes[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off = end;
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    if off != bytes.len() {
        return Err(NumError::Checkpoint(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok(Checkpoint { tensors, meta: header.meta })
}
