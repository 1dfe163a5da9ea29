//! Single-file model checkpoint.
//!
//! Layout: `b"ATVC"`, version `u32` LE, header length `u64` LE, a UTF-8
//! JSON header holding the model config and a tensor table, then the raw
//! little-endian `f32` payload with tensors contiguous in table order.
//! Offsets in the table are relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AtvError, Result};
use crate::model::{LayerKind, Model, ModelConfig, TransformerBlock};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"ATVC";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

impl TensorEntry {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn block_tensors(config: &ModelConfig, b: usize) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<(String, Vec<usize>)> = LayerKind::ALL
        .iter()
        .map(|&l| {
            let (o, i) = config.layer_shape(l);
            (format!("blocks.{b}.{}", l.name()), vec![o, i])
        })
        .collect();
    v.push((format!("blocks.{b}.norm1"), vec![config.d_model]));
    v.push((format!("blocks.{b}.norm2"), vec![config.d_model]));
    v
}

/// Tensor names and shapes in payload order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    (0..config.n_blocks).flat_map(|b| block_tensors(config, b)).collect()
}

fn block_data(block: &TransformerBlock) -> Vec<&[f32]> {
    let mut v: Vec<&[f32]> = LayerKind::ALL.iter().map(|&l| block.layer(l).data()).collect();
    v.push(&block.norm1);
    v.push(&block.norm2);
    v
}

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let mut offset = 0u64;
    let tensors = tensor_layout(&model.config)
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry {
                name,
                dtype: "f32".into(),
                offset,
                shape,
            };
            offset += 4 * e.numel() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config,
        tensors,
    })?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for block in &model.blocks {
        for t in block_data(block) {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 {
        let mut m = [0u8; 4];
        m[..bytes.len()].copy_from_slice(bytes);
        return Err(AtvError::BadMagic(m));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(AtvError::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE {
        return Err(AtvError::TruncatedPayload(format!(
            "file is {} bytes, shorter than the {PREAMBLE}-byte preamble",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(AtvError::BadVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| {
            AtvError::TruncatedPayload(format!(
                "header of {header_len} bytes runs past end of {}-byte file",
                bytes.len()
            ))
        })? as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| AtvError::BadHeader(e.to_string()))?;
    let config = header.config;
    config.validate()?;
    let payload = &bytes[header_end..];

    let expected = tensor_layout(&config);
    if header.tensors.len() != expected.len() {
        return Err(AtvError::BadHeader(format!(
            "{} tensors in table, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut data = Vec::with_capacity(expected.len());
    let mut prev_end = 0u64;
    for (e, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &e.name != name || &e.shape != shape {
            return Err(AtvError::BadHeader(format!(
                "expected `{name}` {shape:?}, found `{}` {:?}",
                e.name, e.shape
            )));
        }
        if e.dtype != "f32" {
            return Err(AtvError::BadHeader(format!("`{}` has dtype `{}`, only f32 is supported", e.name, e.dtype)));
        }
        if e.offset < prev_end {
            return Err(AtvError::BadHeader(format!("`{}` offset {} overlaps the previous tensor", e.name, e.offset)));
        }
        let end = e.offset + 4 * e.numel() as u64;
        if end > payload.len() as u64 {
            return Err(AtvError::TruncatedPayload(format!(
                "`{}` spans payload bytes {}..{end}, payload has {}",
                e.name,
                e.offset,
                payload.len()
            )));
        }
        let raw = &payload[e.offset as usize..end as usize];
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AtvError::NonFinite(format!("tensor `{}`", e.name)));
        }
        data.push(values);
        prev_end = end;
    }

    let mut tensors = data.into_iter();
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        let mut block = TransformerBlock::zeros(&config);
        for l in LayerKind::ALL {
            let (o, i) = config.layer_shape(l);
            *block.layer_mut(l) = Matrix::from_vec(o, i, tensors.next().expect("layout"))?;
        }
        block.norm1 = tensors.next().expect("layout");
        block.norm2 = tensors.next().expect("layout");
        blocks.push(block);
    }
    Ok(Model { config, blocks })
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}
