//! File helpers shared by the container formats.

use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename. A failed write leaves no file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Splits a framed file (`magic`, little-endian u32 header length, UTF-8
/// JSON header, payload) into its header text and payload.
pub(crate) fn split_framed<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a str, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(Error::format(format!(
            "missing magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::format("truncated header"))?;
    let header = std::str::from_utf8(&bytes[8..end])
        .map_err(|_| Error::format("header is not valid UTF-8"))?;
    Ok((header, &bytes[end..]))
}

/// Assembles a framed file from its parts.
pub(crate) fn join_framed(magic: &[u8; 4], header: &[u8], payload: &[u8]) -> Result<Vec<u8>> {
    let len = u32::try_from(header.len()).map_err(|_| Error::format("header too large"))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    Ok(out)
}

pub(crate) fn f32s_to_le(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_into_missing_directory_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no/such/dir/file.bin");
        assert!(write_atomic(&path, b"abc").is_err());
        assert!(!path.exists());
    }

    #[test]
    fn framed_rejects_truncated_header() {
        let bytes = join_framed(b"TEST", b"{\"a\":1}", b"xyz").unwrap();
        let (h, p) = split_framed(&bytes, b"TEST").unwrap();
        assert_eq!(h, "{\"a\":1}");
        assert_eq!(p, b"xyz");
        assert!(split_framed(&bytes[..10], b"TEST").is_err());
        assert!(split_framed(&bytes, b"NOPE").is_err());
    }
}
