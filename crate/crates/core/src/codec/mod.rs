//! Bit-exact serialization of compressed models: packed and Huffman-coded
//! labels, codebooks, and compression-ratio accounting.

mod bitpack;
mod bqz;
mod huffman;

pub use bitpack::{pack_labels, packed_len, unpack_labels, PackedStream};
pub use bqz::{
    codings_from_bq, codings_from_gwk, load_compressed, read_compressed, save_compressed, write_compressed,
    BqzHeader, BqzTensor, Coding, CompressedModel, LabelEncoding, LabelStream, TensorCoding, BQZ_MAGIC,
    BQZ_VERSION,
};
pub use huffman::{encode_with, huffman_decode, huffman_encode, HuffmanTable, MAX_CODE_LEN};

use crate::{Error, Result};

/// Storage reduction of an `n × m` float layer replaced by `b` float
/// representatives and `log2(b)`-bit labels: `32nm / (log2(b)·nm + 32b)`.
/// Values below 1 mean the coding costs more than raw floats.
pub fn compression_ratio(n: usize, m: usize, b: usize) -> Result<f64> {
    if n == 0 || m == 0 {
        return Err(Error::arg("layer dimensions must be positive"));
    }
    if b < 2 {
        return Err(Error::arg("compression ratio needs at least two bins"));
    }
    let nm = n as f64 * m as f64;
    Ok(32.0 * nm / ((b as f64).log2() * nm + 32.0 * b as f64))
}

/// `original / compressed`, for comparing file sizes.
pub fn measured_ratio(original_bytes: usize, compressed_bytes: usize) -> f64 {
    original_bytes as f64 / compressed_bytes as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_formula() {
        assert!((compression_ratio(100, 100, 4).unwrap() - 320000.0 / 20128.0).abs() < 1e-12);
        assert!((compression_ratio(100, 100, 4).unwrap() - 15.898).abs() < 1e-3);
        let r = compression_ratio(1000, 1000, 16).unwrap();
        assert!((r - 7.999).abs() < 1e-3 && r < 8.0);
        assert!(compression_ratio(1, 1, 1 << 20).unwrap() < 1.0);
        assert!(compression_ratio(10, 10, 1).is_err());
        assert!(compression_ratio(0, 10, 4).is_err());
    }
}
