//! Checkpoint format: one JSON header line, then the parameter tensors as
//! little-endian f32 arrays in declared order (embedding, each hidden
//! layer's weight then bias, output weight then bias). Files are written
//! atomically (temp file in the target directory, then rename).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenseLayer, ModelDims, ModelError, ModelParams};
use crate::ArtifactMeta;
use ndarray::{Array1, Array2};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    path: &Path,
    seed: u64,
    epoch: usize,
    meta: Option<ArtifactMeta>,
) -> Result<(), ModelError> {
    params.validate()?;
    let header = CheckpointHeader {
        format: "reduxlab-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        dims: params.dims.clone(),
        seed,
        epoch,
        meta,
    };
    let mut body = serde_json::to_vec(&header).expect("header serializes");
    body.push(b'\n');
    for tensor in params.tensors() {
        for &value in tensor {
            body.extend_from_slice(&value.to_le_bytes());
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        file.write_all(&body).map_err(|e| io_err(&tmp, e))?;
        file.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointHeader), ModelError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| ModelError::Checkpoint(format!("corrupt header: {e}")))?;
    if header.format != "reduxlab-checkpoint" {
        return Err(ModelError::Checkpoint(format!(
            "unrecognized format tag `{}`",
            header.format
        )));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "version mismatch: file has {}, this build reads {}",
            header.version, CHECKPOINT_VERSION
        )));
    }
    header.dims.validate()?;
    let dims = header.dims.clone();
    let mut shapes: Vec<(usize, usize)> = vec![(dims.vocab_size, dims.embed_dim)];
    let mut in_dim = dims.input_dim();
    for &width in &dims.hidden_dims {
        shapes.push((width, in_dim));
        shapes.push((width, 1));
        in_dim = width;
    }
    shapes.push((dims.num_classes, in_dim));
    shapes.push((dims.num_classes, 1));
    let expected: usize = shapes.iter().map(|(r, c)| r * c * 4).sum();
    let payload = &bytes[newline + 1..];
    if payload.len() != expected {
        return Err(ModelError::Checkpoint(format!(
            "truncated or oversized payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    let mut offset = 0usize;
    let mut read = |rows: usize, cols: usize| -> Vec<f32> {
        let n = rows * cols;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = [0u8; 4];
            buf.copy_from_slice(&payload[offset..offset + 4]);
            out.push(f32::from_le_bytes(buf));
            offset += 4;
        }
        out
    };
    let embedding =
        Array2::from_shape_vec((dims.vocab_size, dims.embed_dim), read(dims.vocab_size, dims.embed_dim))
            .expect("shape checked");
    let mut hidden = Vec::with_capacity(dims.hidden_dims.len());
    let mut in_dim = dims.input_dim();
    for &width in &dims.hidden_dims {
        let weight = Array2::from_shape_vec((width, in_dim), read(width, in_dim))
            .expect("shape checked");
        let bias = Array1::from_vec(read(width, 1));
        hidden.push(DenseLayer { weight, bias });
        in_dim = width;
    }
    let output = DenseLayer {
        weight: Array2::from_shape_vec((dims.num_classes, in_dim), read(dims.num_classes, in_dim))
            .expect("shape checked"),
        bias: Array1::from_vec(read(dims.num_classes, 1)),
    };
    let params = ModelParams {
        dims,
        embedding,
        hidden,
        output,
    };
    params.validate()?;
    Ok((params, header))
}
