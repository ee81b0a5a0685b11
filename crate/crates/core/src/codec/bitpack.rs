//! Fixed-width label packing, LSB-first within each byte.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedStream {
    pub bits: u32,
    pub count: usize,
    pub payload: Vec<u8>,
}

/// Bytes needed for `count` symbols of `bits` bits.
pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(Error::arg(format!("bits per symbol must be in 1..=16, got {bits}")));
    }
    Ok(())
}

/// Writes bits into a byte buffer, filling each byte from its lowest bit.
#[derive(Debug, Default)]
pub(crate) struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    used: u32,
}

impl BitWriter {
    pub(crate) fn with_capacity(bytes: usize) -> Self {
        BitWriter { bytes: Vec::with_capacity(bytes), acc: 0, used: 0 }
    }

    /// Appends the low `n` bits of `value` (n ≤ 32), lowest bit first.
    pub(crate) fn write(&mut self, value: u64, n: u32) {
        debug_assert!(n <= 32);
        self.acc |= (value & ((1u64 << n) - 1)) << self.used;
        self.used += n;
        while self.used >= 8 {
            self.bytes.push(self.acc as u8);
            self.acc >>= 8;
            self.used -= 8;
        }
    }

    pub(crate) fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.bytes.push(self.acc as u8);
        }
        self.bytes
    }
}

pub(crate) struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub(crate) fn bit(&mut self) -> Option<u64> {
        let byte = *self.bytes.get(self.pos / 8)?;
        let b = (byte >> (self.pos % 8)) & 1;
        self.pos += 1;
        Some(u64::from(b))
    }

    pub(crate) fn read(&mut self, n: u32) -> Option<u64> {
        let mut v = 0;
        for i in 0..n {
            v |= self.bit()? << i;
        }
        Some(v)
    }
}

pub fn pack_labels(labels: &[u32], bits: u32) -> Result<PackedStream> {
    check_bits(bits)?;
    let limit = 1u64 << bits;
    let mut w = BitWriter::with_capacity(packed_len(labels.len(), bits));
    for (i, &l) in labels.iter().enumerate() {
        if u64::from(l) >= limit {
            return Err(Error::arg(format!("label {l} at position {i} does not fit in {bits} bits")));
        }
        w.write(u64::from(l), bits);
    }
    Ok(PackedStream { bits, count: labels.len(), payload: w.finish() })
}

pub fn unpack_labels(stream: &PackedStream) -> Result<Vec<u32>> {
    check_bits(stream.bits)?;
    if stream.payload.len() != packed_len(stream.count, stream.bits) {
        return Err(Error::format(format!(
            "packed stream of {} symbols x {} bits needs {} bytes, got {}",
            stream.count,
            stream.bits,
            packed_len(stream.count, stream.bits),
            stream.payload.len()
        )));
    }
    let mut r = BitReader::new(&stream.payload);
    (0..stream.count)
        .map(|_| r.read(stream.bits).map(|v| v as u32).ok_or_else(|| Error::format("truncated packed stream")))
        .collect()
}
