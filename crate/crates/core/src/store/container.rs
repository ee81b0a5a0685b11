//! `.nnmod`: `NNM1`, u32 LE header length, JSON header, raw LE payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::ModelManifest;
use super::tensor::{DType, QuantParams, TensorData, TensorRecord};
use super::Model;
use crate::io::{f32s_to_le, join_framed, le_to_f32s, split_framed, write_atomic};
use crate::{Error, Result};

pub const NNMOD_MAGIC: &[u8; 4] = b"NNM1";

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: ModelManifest,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantParams>,
}

/// Serializes a model to `.nnmod` bytes.
pub fn write_model(manifest: &ModelManifest, tensors: &[TensorRecord]) -> Result<Vec<u8>> {
    manifest.validate(tensors)?;
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let offset = payload.len();
        match t.data() {
            TensorData::F32(v) => f32s_to_le(v, &mut payload),
            TensorData::U8(v) => payload.extend_from_slice(v),
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            offset,
            length: payload.len() - offset,
            quant: t.quant(),
        });
    }
    let header = serde_json::to_vec(&Header { manifest: manifest.clone(), tensors: entries })?;
    join_framed(NNMOD_MAGIC, &header, &payload)
}

/// Parses `.nnmod` bytes.
pub fn read_model(bytes: &[u8]) -> Result<Model> {
    let (header, payload) = split_framed(bytes, NNMOD_MAGIC)?;
    let header: Header = serde_json::from_str(header)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|end| *end <= payload.len())
            .ok_or_else(|| Error::format(format!("tensor `{}` runs past end of file", e.name)))?;
        let raw = &payload[e.offset..end];
        let count: usize = e.shape.iter().product();
        if count * e.dtype.size_bytes() != e.length {
            return Err(Error::format(format!("tensor `{}` length disagrees with shape", e.name)));
        }
        let data = match e.dtype {
            DType::F32 => TensorData::F32(le_to_f32s(raw)),
            DType::U8 => TensorData::U8(raw.to_vec()),
        };
        tensors.push(TensorRecord::new(e.name, e.shape, data, e.quant)?);
    }
    Model::new(header.manifest, tensors)
}

/// Writes a model to `path` atomically and returns the number of bytes written.
pub fn save_model(manifest: &ModelManifest, tensors: &[TensorRecord], path: &Path) -> Result<usize> {
    let bytes = write_model(manifest, tensors)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_model(path: &Path) -> Result<Model> {
    read_model(&std::fs::read(path)?)
}
