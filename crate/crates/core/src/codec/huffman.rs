//! Canonical Huffman coding of label streams.
//!
//! Only code lengths are stored. Codes are assigned in (length, symbol)
//! order and written most-significant bit first into an LSB-first bitstream.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::bitpack::{BitReader, BitWriter};
use crate::{Error, Result};

/// Longest code the encoder produces.
pub const MAX_CODE_LEN: u8 = 32;
/// Longest code the decoder accepts.
const MAX_DECODE_LEN: u8 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HuffmanTable {
    /// Code length per symbol; 0 marks an unused symbol.
    pub lengths: Vec<u8>,
}

fn tree_lengths(freqs: &[u64]) -> Vec<u8> {
    let used: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
    let mut lengths = vec![0u8; freqs.len()];
    if used.len() == 1 {
        lengths[used[0]] = 1;
        return lengths;
    }
    // Nodes ordered by (frequency, smallest symbol below them).
    let mut parent: Vec<usize> = Vec::new();
    let mut heap = BinaryHeap::new();
    for &s in &used {
        heap.push(Reverse((freqs[s], s, parent.len())));
        parent.push(usize::MAX);
    }
    while heap.len() > 1 {
        let Reverse((fa, sa, a)) = heap.pop().unwrap();
        let Reverse((fb, sb, b)) = heap.pop().unwrap();
        let id = parent.len();
        parent.push(usize::MAX);
        parent[a] = id;
        parent[b] = id;
        heap.push(Reverse((fa + fb, sa.min(sb), id)));
    }
    for (leaf, &s) in used.iter().enumerate() {
        let mut depth = 0u32;
        let mut n = leaf;
        while parent[n] != usize::MAX {
            n = parent[n];
            depth += 1;
        }
        lengths[s] = depth.min(255) as u8;
    }
    lengths
}

impl HuffmanTable {
    /// Builds code lengths from symbol frequencies. Ties merge the node with
    /// the smaller (frequency, symbol) first; a lone symbol gets length 1.
    pub fn from_frequencies(freqs: &[u64]) -> Result<Self> {
        if freqs.iter().all(|&f| f == 0) {
            return Err(Error::arg("cannot build a Huffman table without symbols"));
        }
        let mut scaled = freqs.to_vec();
        loop {
            let lengths = tree_lengths(&scaled);
            if lengths.iter().all(|&l| l <= MAX_CODE_LEN) {
                return Ok(HuffmanTable { lengths });
            }
            // Flatten the distribution until the deepest code fits.
            for f in scaled.iter_mut().filter(|f| **f > 0) {
                *f = (*f >> 1).max(1);
            }
        }
    }

    pub fn from_labels(labels: &[u32]) -> Result<Self> {
        let max = labels.iter().copied().max().ok_or_else(|| Error::arg("cannot encode an empty stream"))?;
        let mut freqs = vec![0u64; max as usize + 1];
        for &l in labels {
            freqs[l as usize] += 1;
        }
        Self::from_frequencies(&freqs)
    }

    /// Σ 2^(−len) over used symbols, scaled by 2^64 to stay exact.
    fn kraft_scaled(&self) -> u128 {
        self.lengths.iter().filter(|&&l| l > 0).map(|&l| 1u128 << (64 - u32::from(l))).sum()
    }

    pub fn kraft_sum(&self) -> f64 {
        self.kraft_scaled() as f64 / 2f64.powi(64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.iter().any(|&l| l > MAX_DECODE_LEN) {
            return Err(Error::format("Huffman code length exceeds 64 bits"));
        }
        if self.lengths.iter().all(|&l| l == 0) {
            return Err(Error::format("Huffman table has no symbols"));
        }
        if self.kraft_scaled() > 1u128 << 64 {
            return Err(Error::format("Huffman code lengths violate the Kraft inequality"));
        }
        Ok(())
    }

    /// Canonical codes: `(code, length)` per symbol.
    pub fn codes(&self) -> Vec<(u64, u8)> {
        let mut order: Vec<usize> = (0..self.lengths.len()).filter(|&s| self.lengths[s] > 0).collect();
        order.sort_by_key(|&s| (self.lengths[s], s));
        let mut codes = vec![(0u64, 0u8); self.lengths.len()];
        let mut code = 0u64;
        let mut prev_len = 0u8;
        for (i, &s) in order.iter().enumerate() {
            let len = self.lengths[s];
            if i > 0 {
                code = (code + 1) << (len - prev_len);
            } else {
                code <<= len;
            }
            codes[s] = (code, len);
            prev_len = len;
        }
        codes
    }

    /// Encoded size in bits of a stream with the given frequencies.
    pub fn encoded_bits(&self, freqs: &[u64]) -> u64 {
        freqs.iter().zip(&self.lengths).map(|(&f, &l)| f * u64::from(l)).sum()
    }
}

/// Encodes `labels`, returning the table, the bitstream and its length in bits.
pub fn huffman_encode(labels: &[u32]) -> Result<(HuffmanTable, Vec<u8>, u64)> {
    let table = HuffmanTable::from_labels(labels)?;
    let (bytes, bits) = encode_with(&table, labels)?;
    Ok((table, bytes, bits))
}

pub fn encode_with(table: &HuffmanTable, labels: &[u32]) -> Result<(Vec<u8>, u64)> {
    let codes = table.codes();
    let mut w = BitWriter::default();
    let mut total = 0u64;
    for &l in labels {
        let &(code, len) = codes
            .get(l as usize)
            .filter(|c| c.1 > 0)
            .ok_or_else(|| Error::arg(format!("symbol {l} has no code")))?;
        // Most significant code bit first.
        for i in (0..len).rev() {
            w.write((code >> i) & 1, 1);
        }
        total += u64::from(len);
    }
    Ok((w.finish(), total))
}

/// Decodes `count` symbols. Fails on a Kraft violation, truncation or an
/// invalid code.
pub fn huffman_decode(table: &HuffmanTable, bytes: &[u8], count: usize) -> Result<Vec<u32>> {
    table.validate()?;
    let max_len = *table.lengths.iter().max().unwrap() as usize;
    // Canonical decoding tables: first code and symbols per length.
    let mut by_len: Vec<Vec<u32>> = vec![Vec::new(); max_len + 1];
    let mut order: Vec<usize> = (0..table.lengths.len()).filter(|&s| table.lengths[s] > 0).collect();
    order.sort_by_key(|&s| (table.lengths[s], s));
    for &s in &order {
        by_len[table.lengths[s] as usize].push(s as u32);
    }
    let mut first = vec![0u128; max_len + 1];
    let mut code = 0u128;
    for len in 1..=max_len {
        code = (code + by_len[len - 1].len() as u128) << 1;
        first[len] = code;
    }
    // Single-symbol tables use the one-bit code 0; `first[1]` is already 0.
    let mut r = BitReader::new(bytes);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut c = 0u128;
        let mut found = None;
        for len in 1..=max_len {
            let bit = r.bit().ok_or_else(|| Error::format("truncated Huffman stream"))?;
            c = (c << 1) | u128::from(bit);
            let offset = c.wrapping_sub(first[len]);
            if c >= first[len] && offset < by_len[len].len() as u128 {
                found = Some(by_len[len][offset as usize]);
                break;
            }
        }
        out.push(found.ok_or_else(|| Error::format("invalid Huffman code"))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::bitpack::pack_labels;
    use proptest::prelude::*;

    #[test]
    fn textbook_lengths() {
        let t = HuffmanTable::from_frequencies(&[5, 2, 1, 1]).unwrap();
        assert_eq!(t.lengths, vec![1, 2, 3, 3]);
        assert_eq!(t.encoded_bits(&[5, 2, 1, 1]), 15);
        let labels = [0, 0, 0, 0, 0, 1, 1, 2, 3];
        let (table, bytes, bits) = huffman_encode(&labels).unwrap();
        assert_eq!(table, t);
        assert_eq!(bits, 15);
        assert_eq!(bytes.len(), 2);
        assert_eq!(huffman_decode(&table, &bytes, labels.len()).unwrap(), labels);
        assert_eq!(t.codes(), vec![(0b0, 1), (0b10, 2), (0b110, 3), (0b111, 3)]);
    }

    #[test]
    fn uniform_alphabet_has_no_gain() {
        let labels: Vec<u32> = (0..64).map(|i| i % 8).collect();
        let (t, bytes, bits) = huffman_encode(&labels).unwrap();
        assert!(t.lengths.iter().all(|&l| l == 3));
        assert_eq!(bytes.len(), pack_labels(&labels, 3).unwrap().payload.len());
        assert_eq!(bits, 64 * 3);
    }

    #[test]
    fn single_symbol_gets_one_bit() {
        let labels = [7u32; 10];
        let (t, bytes, bits) = huffman_encode(&labels).unwrap();
        assert_eq!(t.lengths[7], 1);
        assert_eq!(bits, 10);
        assert_eq!(huffman_decode(&t, &bytes, 10).unwrap(), labels);
    }

    #[test]
    fn skewed_stream_beats_packing() {
        let mut labels = vec![0u32; 900];
        labels.extend((0..100).map(|i| 1 + i % 15));
        let (t, bytes, _) = huffman_encode(&labels).unwrap();
        let packed = pack_labels(&labels, 4).unwrap().payload.len();
        assert!(bytes.len() + t.lengths.len() < packed);
    }

    #[test]
    fn rejects_bad_tables_and_streams() {
        let bad = HuffmanTable { lengths: vec![1, 1, 1] };
        assert!(huffman_decode(&bad, &[0], 1).is_err());
        let t = HuffmanTable::from_frequencies(&[5, 2, 1, 1]).unwrap();
        assert!(huffman_decode(&t, &[], 1).is_err());
        assert!(HuffmanTable::from_frequencies(&[0, 0]).is_err());
        assert!(huffman_encode(&[]).is_err());
        assert!(encode_with(&t, &[9]).is_err());
    }

    #[test]
    fn fibonacci_frequencies_are_length_limited() {
        let mut freqs = vec![1u64, 1];
        while freqs.len() < 60 {
            let n = freqs.len();
            freqs.push(freqs[n - 1] + freqs[n - 2]);
        }
        let t = HuffmanTable::from_frequencies(&freqs).unwrap();
        assert!(t.lengths.iter().all(|&l| (1..=MAX_CODE_LEN).contains(&l)));
        assert!(t.kraft_sum() <= 1.0);
    }

    #[test]
    fn tables_are_deterministic() {
        let f = [3, 3, 3, 1, 1, 9, 0, 2];
        assert_eq!(HuffmanTable::from_frequencies(&f).unwrap(), HuffmanTable::from_frequencies(&f).unwrap());
    }

    proptest! {
        #[test]
        fn roundtrip(labels in prop::collection::vec(0u32..300, 1..400)) {
            let (t, bytes, bits) = huffman_encode(&labels).unwrap();
            prop_assert!(t.kraft_sum() <= 1.0);
            prop_assert_eq!(bytes.len() as u64, bits.div_ceil(8));
            prop_assert_eq!(huffman_decode(&t, &bytes, labels.len()).unwrap(), labels);
        }
    }
}
