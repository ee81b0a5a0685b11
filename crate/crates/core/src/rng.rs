//! Seeded random streams.
//!
//! Every random draw in the toolkit comes from a stream derived from a root
//! seed and a path of labels (layer name, row index, purpose). Streams are
//! independent of the order in which they are created, so parallel execution
//! never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// A label component of a stream path.
#[derive(Debug, Clone, Copy)]
pub enum Tag<'a> {
    Str(&'a str),
    Num(u64),
}

impl<'a> From<&'a str> for Tag<'a> {
    fn from(s: &'a str) -> Self {
        Tag::Str(s)
    }
}

impl<'a> From<&'a String> for Tag<'a> {
    fn from(s: &'a String) -> Self {
        Tag::Str(s.as_str())
    }
}

impl From<u64> for Tag<'_> {
    fn from(n: u64) -> Self {
        Tag::Num(n)
    }
}

impl From<usize> for Tag<'_> {
    fn from(n: usize) -> Self {
        Tag::Num(n as u64)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the 64-bit seed of the stream at `path` under `root`.
pub fn derive_seed(root: u64, path: &[Tag<'_>]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &root.to_le_bytes());
    for tag in path {
        // Type byte keeps "1" and 1 apart.
        match tag {
            Tag::Str(s) => {
                h = fnv1a(h, &[0x53]);
                h = fnv1a(h, &(s.len() as u64).to_le_bytes());
                h = fnv1a(h, s.as_bytes());
            }
            Tag::Num(n) => {
                h = fnv1a(h, &[0x4e]);
                h = fnv1a(h, &n.to_le_bytes());
            }
        }
    }
    splitmix64(h)
}

/// Opens the stream at `path` under `root`.
pub fn stream(root: u64, path: &[Tag<'_>]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, path))
}
