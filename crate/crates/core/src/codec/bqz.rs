//! The `.bqz` container.
//!
//! Layout: magic `BQZ1`, u16 version, u32 header length, u32 CRC-32 of the
//! header, UTF-8 JSON header, then one byte-aligned payload section per
//! tensor. Every section carries its own CRC-32 in the header, so a corrupted
//! byte fails loudly instead of decoding to different weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bitpack::{pack_labels, unpack_labels, PackedStream};
use super::huffman::{encode_with, huffman_decode, HuffmanTable};
use crate::binquant::{label_bits, BqModelResult};
use crate::gwk::{GwkOutcome, LayerStorage};
use crate::io::{f32s_to_le, le_to_f32s, write_atomic};
use crate::store::{DType, Model, ModelManifest, QuantParams, TensorData, TensorRecord};
use crate::{Error, Result};

pub const BQZ_MAGIC: &[u8; 4] = b"BQZ1";
pub const BQZ_VERSION: u16 = 1;
const PREFIX_LEN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelEncoding {
    Packed,
    Huffman,
    /// Whichever of the two is smaller, table included.
    #[default]
    Auto,
}

/// How a tensor is represented before serialization.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorCoding {
    Raw,
    /// One label per weight into scalar representatives.
    Bins { representatives: Vec<f64>, labels: Vec<u32> },
    /// One label per `d`-block into `d`-dimensional centroids.
    Pq { d: usize, pad: usize, centroids: Vec<f64>, labels: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "kebab-case")]
pub enum LabelStream {
    Packed { bits: u32 },
    Huffman { lengths: Vec<u8>, bits: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Coding {
    Raw,
    Bins { bins: usize, label_bits: u32, labels: LabelStream },
    Pq { d: usize, pad: usize, n_clusters: usize, label_bits: u32, labels: LabelStream },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BqzTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
    pub coding: Coding,
    pub offset: usize,
    pub length: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BqzHeader {
    pub manifest: ModelManifest,
    pub tensors: Vec<BqzTensor>,
}

#[derive(Debug, Clone)]
pub struct CompressedModel {
    pub header: BqzHeader,
    /// The reconstructed model, with stored values exactly as compressed.
    pub model: Model,
    /// Magic, version, lengths and JSON header.
    pub overhead_bytes: usize,
    pub payload_bytes: usize,
}

impl CompressedModel {
    /// Storage of every weight layer, as recorded in the header.
    pub fn layer_storage(&self) -> Vec<LayerStorage> {
        self.header
            .manifest
            .layers
            .iter()
            .filter_map(|l| {
                let t = self.header.tensors.iter().find(|t| Some(&t.name) == l.weight_ref.as_ref())?;
                let weight_count = t.shape.iter().product();
                let layer = l.name.clone();
                Some(match &t.coding {
                    Coding::Raw => LayerStorage::Native { layer, weight_count, bits: t.dtype.bits() },
                    Coding::Bins { bins, .. } => {
                        LayerStorage::Bins { layer, weight_count, bins: *bins, value_bits: t.dtype.bits() }
                    }
                    Coding::Pq { d, n_clusters, pad, .. } => LayerStorage::Pq {
                        layer,
                        weight_count,
                        n_blocks: (weight_count + pad) / d,
                        d: *d,
                        n_clusters: *n_clusters,
                    },
                })
            })
            .collect()
    }
}

fn encode_labels(labels: &[u32], bits: u32, enc: LabelEncoding) -> Result<(LabelStream, Vec<u8>)> {
    let packed = || -> Result<(LabelStream, Vec<u8>)> {
        Ok((LabelStream::Packed { bits }, pack_labels(labels, bits)?.payload))
    };
    let huffman = || -> Result<(LabelStream, Vec<u8>)> {
        let table = HuffmanTable::from_labels(labels)?;
        let (bytes, nbits) = encode_with(&table, labels)?;
        Ok((LabelStream::Huffman { lengths: table.lengths, bits: nbits }, bytes))
    };
    if labels.is_empty() {
        return packed();
    }
    match enc {
        LabelEncoding::Packed => packed(),
        LabelEncoding::Huffman => huffman(),
        LabelEncoding::Auto => {
            let p = packed()?;
            let h = huffman()?;
            let h_size = h.1.len() + if let LabelStream::Huffman { lengths, .. } = &h.0 { lengths.len() } else { 0 };
            Ok(if h_size < p.1.len() { h } else { p })
        }
    }
}

fn decode_labels(stream: &LabelStream, bytes: &[u8], count: usize, limit: usize) -> Result<Vec<u32>> {
    let labels = match stream {
        LabelStream::Packed { bits } => {
            unpack_labels(&PackedStream { bits: *bits, count, payload: bytes.to_vec() })?
        }
        LabelStream::Huffman { lengths, bits } => {
            if bytes.len() as u64 != bits.div_ceil(8) {
                return Err(Error::format("Huffman section length does not match its bit count"));
            }
            huffman_decode(&HuffmanTable { lengths: lengths.clone() }, bytes, count)?
        }
    };
    if labels.iter().any(|&l| l as usize >= limit) {
        return Err(Error::format(format!("label out of range for {limit} entries")));
    }
    Ok(labels)
}

fn values_to_bytes(values: &[f64], dtype: DType, out: &mut Vec<u8>) -> Result<()> {
    match dtype {
        DType::F32 => f32s_to_le(&values.iter().map(|&v| v as f32).collect::<Vec<_>>(), out),
        DType::U8 => {
            for &v in values {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::arg(format!("{v} is not a uint8 code")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(())
}

fn bytes_to_values(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F32 => le_to_f32s(bytes).into_iter().map(f64::from).collect(),
        DType::U8 => bytes.iter().map(|&b| f64::from(b)).collect(),
    }
}

fn rebuild(dtype: DType, values: impl Iterator<Item = f64>) -> TensorData {
    match dtype {
        DType::F32 => TensorData::F32(values.map(|v| v as f32).collect()),
        DType::U8 => TensorData::U8(values.map(|v| v as u8).collect()),
    }
}

/// Tensor data decoded from codebook entries (already at storage precision)
/// and labels.
fn expand(coding: &TensorCoding, dtype: DType, len: usize, table: &[f64]) -> TensorData {
    match coding {
        TensorCoding::Raw => unreachable!("raw tensors are not expanded"),
        TensorCoding::Bins { labels, .. } => rebuild(dtype, labels.iter().map(|&l| table[l as usize])),
        TensorCoding::Pq { d, labels, .. } => rebuild(
            dtype,
            labels.iter().flat_map(|&l| table[l as usize * d..(l as usize + 1) * d].iter().copied()).take(len),
        ),
    }
}

/// Serializes a model whose tensors are stored raw, as bins or as PQ blocks.
/// Coded tensors must decode to exactly the record's data.
pub fn write_compressed(
    manifest: &ModelManifest,
    tensors: &[(TensorRecord, TensorCoding)],
    enc: LabelEncoding,
) -> Result<Vec<u8>> {
    let records: Vec<TensorRecord> = tensors.iter().map(|(t, _)| t.clone()).collect();
    manifest.validate(&records)?;
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (t, coding) in tensors {
        let offset = payload.len();
        let header_coding = match coding {
            TensorCoding::Raw => {
                match t.data() {
                    TensorData::F32(v) => f32s_to_le(v, &mut payload),
                    TensorData::U8(v) => payload.extend_from_slice(v),
                }
                Coding::Raw
            }
            TensorCoding::Bins { representatives, labels } => {
                let b = representatives.len();
                if b == 0 || labels.len() != t.len() || labels.iter().any(|&l| l as usize >= b) {
                    return Err(Error::arg(format!("bin labels do not fit `{}`", t.name)));
                }
                let bits = label_bits(b);
                values_to_bytes(representatives, t.dtype(), &mut payload)?;
                let stored = bytes_to_values(&payload[offset..], t.dtype());
                if &expand(coding, t.dtype(), t.len(), &stored) != t.data() {
                    return Err(Error::arg(format!("bins of `{}` do not reproduce its data", t.name)));
                }
                let (stream, bytes) = encode_labels(labels, bits, enc)?;
                payload.extend_from_slice(&bytes);
                Coding::Bins { bins: b, label_bits: bits, labels: stream }
            }
            TensorCoding::Pq { d, pad, centroids, labels } => {
                if t.dtype() != DType::F32 {
                    return Err(Error::arg(format!("PQ coding needs an F32 tensor, `{}` is not", t.name)));
                }
                if *d == 0 || centroids.is_empty() || centroids.len() % d != 0 || *pad >= *d {
                    return Err(Error::arg(format!("bad PQ codebook for `{}`", t.name)));
                }
                let b = centroids.len() / d;
                if (labels.len() * d).checked_sub(*pad) != Some(t.len()) || labels.iter().any(|&l| l as usize >= b) {
                    return Err(Error::arg(format!("PQ labels do not fit `{}`", t.name)));
                }
                let bits = label_bits(b);
                values_to_bytes(centroids, DType::F32, &mut payload)?;
                let stored = bytes_to_values(&payload[offset..], DType::F32);
                if &expand(coding, DType::F32, t.len(), &stored) != t.data() {
                    return Err(Error::arg(format!("PQ codebook of `{}` does not reproduce its data", t.name)));
                }
                let (stream, bytes) = encode_labels(labels, bits, enc)?;
                payload.extend_from_slice(&bytes);
                Coding::Pq { d: *d, pad: *pad, n_clusters: b, label_bits: bits, labels: stream }
            }
        };
        entries.push(BqzTensor {
            name: t.name.clone(),
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            quant: t.quant(),
            coding: header_coding,
            offset,
            length: payload.len() - offset,
            crc32: crc32fast::hash(&payload[offset..]),
        });
    }
    let header = serde_json::to_vec(&BqzHeader { manifest: manifest.clone(), tensors: entries })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::format("header too large"))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
    out.extend_from_slice(BQZ_MAGIC);
    out.extend_from_slice(&BQZ_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_compressed(bytes: &[u8]) -> Result<CompressedModel> {
    if bytes.len() < PREFIX_LEN || &bytes[..4] != BQZ_MAGIC {
        return Err(Error::format("missing BQZ1 magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BQZ_VERSION {
        return Err(Error::format(format!("unsupported .bqz version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header_crc = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
    let end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::format("truncated header"))?;
    let header_bytes = &bytes[PREFIX_LEN..end];
    if crc32fast::hash(header_bytes) != header_crc {
        return Err(Error::format("header checksum mismatch"));
    }
    let header: BqzHeader = serde_json::from_slice(header_bytes)?;
    let payload = &bytes[end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let section = e
            .offset
            .checked_add(e.length)
            .and_then(|stop| payload.get(e.offset..stop))
            .ok_or_else(|| Error::format(format!("truncated payload for `{}`", e.name)))?;
        if crc32fast::hash(section) != e.crc32 {
            return Err(Error::format(format!("checksum mismatch in `{}`", e.name)));
        }
        let len: usize = e.shape.iter().product();
        let data = match &e.coding {
            Coding::Raw => {
                if section.len() != len * e.dtype.size_bytes() {
                    return Err(Error::format(format!("raw section of `{}` has the wrong size", e.name)));
                }
                match e.dtype {
                    DType::F32 => TensorData::F32(le_to_f32s(section)),
                    DType::U8 => TensorData::U8(section.to_vec()),
                }
            }
            Coding::Bins { bins, labels: stream, .. } => {
                let table_len = bins * e.dtype.size_bytes();
                let (table, rest) = section
                    .split_at_checked(table_len)
                    .ok_or_else(|| Error::format(format!("truncated bins of `{}`", e.name)))?;
                let values = bytes_to_values(table, e.dtype);
                let labels = decode_labels(stream, rest, len, *bins)?;
                expand(&TensorCoding::Bins { representatives: Vec::new(), labels }, e.dtype, len, &values)
            }
            Coding::Pq { d, pad, n_clusters, labels: stream, .. } => {
                if e.dtype != DType::F32 || *d == 0 || *pad >= *d || (len + pad) % d != 0 {
                    return Err(Error::format(format!("inconsistent PQ header for `{}`", e.name)));
                }
                let (table, rest) = section
                    .split_at_checked(n_clusters * d * 4)
                    .ok_or_else(|| Error::format(format!("truncated codebook of `{}`", e.name)))?;
                let centroids = bytes_to_values(table, DType::F32);
                let labels = decode_labels(stream, rest, (len + pad) / d, *n_clusters)?;
                let coding = TensorCoding::Pq { d: *d, pad: *pad, centroids: Vec::new(), labels };
                expand(&coding, DType::F32, len, &centroids)
            }
        };
        tensors.push(TensorRecord::new(e.name.clone(), e.shape.clone(), data, e.quant)?);
    }
    let used = header.tensors.iter().map(|e| e.offset + e.length).max().unwrap_or(0);
    if used != payload.len() {
        return Err(Error::format(format!("{} unexpected trailing bytes", payload.len() - used)));
    }
    let model = Model::new(header.manifest.clone(), tensors)?;
    Ok(CompressedModel { header, model, overhead_bytes: end, payload_bytes: payload.len() })
}

pub fn save_compressed(
    manifest: &ModelManifest,
    tensors: &[(TensorRecord, TensorCoding)],
    enc: LabelEncoding,
    path: &Path,
) -> Result<usize> {
    let bytes = write_compressed(manifest, tensors, enc)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_compressed(path: &Path) -> Result<CompressedModel> {
    read_compressed(&std::fs::read(path)?)
}

/// Codings for a B&Q result: accepted layers as bins, everything else raw.
pub fn codings_from_bq(result: &BqModelResult) -> Vec<(TensorRecord, TensorCoding)> {
    result
        .model
        .tensors
        .iter()
        .map(|t| {
            let coding = match result.accepted().find(|l| l.tensor == t.name) {
                Some(l) => TensorCoding::Bins {
                    representatives: l.bin_spec.representatives.clone(),
                    labels: l.labels.clone(),
                },
                None => TensorCoding::Raw,
            };
            (t.clone(), coding)
        })
        .collect()
}

/// Codings for a GWK run: clustered layers as PQ blocks, everything else raw.
pub fn codings_from_gwk(outcome: &GwkOutcome) -> Vec<(TensorRecord, TensorCoding)> {
    outcome
        .model
        .tensors
        .iter()
        .map(|t| {
            let coding = match outcome.layers.iter().find(|l| l.tensor == t.name) {
                Some(l) => TensorCoding::Pq {
                    d: l.d,
                    pad: l.pad,
                    centroids: l.codebook.centroids.clone(),
                    labels: l.codebook.labels.clone(),
                },
                None => TensorCoding::Raw,
            };
            (t.clone(), coding)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{LayerDesc, LayerKind};

    fn dense_model(weights: Vec<f32>) -> (ModelManifest, TensorRecord, TensorRecord) {
        let n_in = weights.len() / 2;
        let manifest = ModelManifest {
            layers: vec![LayerDesc::op("flat", LayerKind::Flatten), LayerDesc::dense("fc")],
            input_shape: vec![n_in],
            num_classes: 2,
            act_quant: None,
        };
        let w = TensorRecord::f32("fc.weight", vec![2, n_in], weights).unwrap();
        let b = TensorRecord::f32("fc.bias", vec![2], vec![0.25, -0.5]).unwrap();
        (manifest, w, b)
    }

    #[test]
    fn raw_roundtrip_and_overhead() {
        let (m, w, b) = dense_model(vec![0.5, -1.5, 2.0, 0.125]);
        let bytes = write_compressed(&m, &[(w.clone(), TensorCoding::Raw), (b.clone(), TensorCoding::Raw)], LabelEncoding::Auto)
            .unwrap();
        let back = read_compressed(&bytes).unwrap();
        assert_eq!(back.model.tensors, vec![w.clone(), b.clone()]);
        assert_eq!(back.payload_bytes, 24);
        let nnmod = crate::store::write_model(&m, &[w, b]).unwrap();
        assert!(bytes.len().abs_diff(nnmod.len()) < 400);
    }

    #[test]
    fn bins_and_pq_roundtrip() {
        let (m, w, b) = dense_model(vec![0.5, -1.5, 0.5, 0.5, -1.5, 0.5]);
        for enc in [LabelEncoding::Packed, LabelEncoding::Huffman, LabelEncoding::Auto] {
            let bins = TensorCoding::Bins { representatives: vec![-1.5, 0.5], labels: vec![1, 0, 1, 1, 0, 1] };
            let bytes = write_compressed(&m, &[(w.clone(), bins), (b.clone(), TensorCoding::Raw)], enc).unwrap();
            assert_eq!(read_compressed(&bytes).unwrap().model.tensors[0], w);

            let pq = TensorCoding::Pq { d: 4, pad: 2, centroids: vec![0.5, -1.5, 0.5, 0.5, -1.5, 0.5, 0.0, 0.0], labels: vec![0, 1] };
            let bytes = write_compressed(&m, &[(w.clone(), pq), (b.clone(), TensorCoding::Raw)], enc).unwrap();
            let back = read_compressed(&bytes).unwrap();
            assert_eq!(back.model.tensors[0], w);
            assert!(matches!(back.layer_storage()[0], LayerStorage::Pq { n_blocks: 2, d: 4, n_clusters: 2, .. }));
        }
    }

    #[test]
    fn inconsistent_codings_are_rejected() {
        let (m, w, b) = dense_model(vec![0.5, -1.5, 0.5, 0.5]);
        let wrong = TensorCoding::Bins { representatives: vec![-1.5, 0.25], labels: vec![1, 0, 1, 1] };
        assert!(write_compressed(&m, &[(w.clone(), wrong), (b.clone(), TensorCoding::Raw)], LabelEncoding::Auto).is_err());
        let short = TensorCoding::Bins { representatives: vec![-1.5, 0.5], labels: vec![1, 0] };
        assert!(write_compressed(&m, &[(w.clone(), short), (b.clone(), TensorCoding::Raw)], LabelEncoding::Auto).is_err());
        assert!(write_compressed(&m, &[(w, TensorCoding::Raw)], LabelEncoding::Auto).is_err());
    }

    #[test]
    fn corruption_and_truncation_fail() {
        let (m, w, b) = dense_model(vec![0.5, -1.5, 0.5, 0.5]);
        let bins = TensorCoding::Bins { representatives: vec![-1.5, 0.5], labels: vec![1, 0, 1, 1] };
        let bytes = write_compressed(&m, &[(w, bins), (b, TensorCoding::Raw)], LabelEncoding::Packed).unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(read_compressed(&bad).is_err(), "flip at byte {i} went unnoticed");
        }
        assert!(read_compressed(&bytes[..bytes.len() - 1]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(read_compressed(&v2).is_err());
    }

    #[test]
    fn u8_bins_store_codes() {
        let manifest = ModelManifest {
            layers: vec![LayerDesc::op("flat", LayerKind::Flatten), LayerDesc::dense("fc")],
            input_shape: vec![2],
            num_classes: 2,
            act_quant: None,
        };
        let q = QuantParams::new(0.01, 128).unwrap();
        let w = TensorRecord::u8("fc.weight", vec![2, 2], vec![10, 200, 10, 10], q).unwrap();
        let b = TensorRecord::f32("fc.bias", vec![2], vec![0.0, 0.0]).unwrap();
        let bins = TensorCoding::Bins { representatives: vec![10.0, 200.0], labels: vec![0, 1, 0, 0] };
        let bytes = write_compressed(&manifest, &[(w.clone(), bins), (b, TensorCoding::Raw)], LabelEncoding::Auto).unwrap();
        let back = read_compressed(&bytes).unwrap();
        assert_eq!(back.model.tensors[0], w);
        assert_eq!(back.model.tensors[0].quant(), Some(q));
    }
}
