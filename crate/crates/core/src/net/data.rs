//! Datasets: synthetic generators and the `.nnd` file format.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::io::{f32s_to_le, join_framed, le_to_f32s, split_framed, write_atomic};
use crate::rng;
use crate::{Error, Result};

pub const NND_MAGIC: &[u8; 4] = b"NND1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Labelled samples stored row-major as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f32>,
    input_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f32>,
        input_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let sample_len: usize = input_shape.iter().product();
        if labels.is_empty() {
            return Err(Error::arg("dataset must contain at least one sample"));
        }
        if sample_len == 0 || inputs.len() != sample_len * labels.len() {
            return Err(Error::shape(format!(
                "{} input values for {} samples of shape {input_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(Dataset { inputs, input_shape, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Samples `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Dataset> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::arg(format!("invalid sample range {range:?} of {}", self.len())));
        }
        let n = self.sample_len();
        Dataset::new(
            self.inputs[range.start * n..range.end * n].to_vec(),
            self.input_shape.clone(),
            self.labels[range].to_vec(),
            self.num_classes,
            self.split,
        )
    }

    /// The first `n` samples (all of them when `n` exceeds the length).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        self.slice(0..n.min(self.len()))
    }

    /// Gathers samples by index.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.sample_len();
        let mut inputs = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::arg(format!("sample index {i} out of range")));
            }
            inputs.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(inputs, self.input_shape.clone(), labels, self.num_classes, self.split)
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.inputs.clone(), self.input_shape.clone(), labels, self.num_classes, self.split)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DatasetHeader {
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            count: self.len(),
            split: self.split,
        };
        let mut payload = Vec::with_capacity(self.inputs.len() * 4 + self.len() * 4);
        f32s_to_le(&self.inputs, &mut payload);
        for &l in &self.labels {
            payload.extend_from_slice(&(l as u32).to_le_bytes());
        }
        join_framed(NND_MAGIC, &serde_json::to_vec(&header)?, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let (header, payload) = split_framed(bytes, NND_MAGIC)?;
        let h: DatasetHeader = serde_json::from_str(header)?;
        let sample_len: usize = h.input_shape.iter().product();
        let input_bytes = h.count * sample_len * 4;
        if payload.len() != input_bytes + h.count * 4 {
            return Err(Error::format("dataset payload size disagrees with header"));
        }
        let inputs = le_to_f32s(&payload[..input_bytes]);
        let labels = payload[input_bytes..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        Dataset::new(inputs, h.input_shape, labels, h.num_classes, h.split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    input_shape: Vec<usize>,
    num_classes: usize,
    count: usize,
    split: Split,
}

/// Isotropic Gaussian blobs with centres placed on scaled coordinate axes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub spread: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec { classes: 2, dim: 4, separation: 3.0, spread: 1.0 }
    }
}

impl BlobSpec {
    fn centre(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        let axis = class / 2 % self.dim;
        let sign = if class % 2 == 0 { 1.0 } else { -1.0 };
        let ring = 1.0 + (class / (2 * self.dim)) as f64;
        c[axis] = sign * self.separation * ring;
        c
    }

    pub fn generate(&self, n: usize, seed: u64, split: Split) -> Result<Dataset> {
        if self.classes < 2 || self.dim == 0 {
            return Err(Error::arg("blobs need at least 2 classes and 1 dimension"));
        }
        let mut rng = rng::stream(seed, &["blobs".into(), split_tag(split).into()]);
        let noise = Normal::new(0.0, self.spread).map_err(|e| Error::arg(e.to_string()))?;
        let mut inputs = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % self.classes;
            for c in self.centre(class) {
                inputs.push((c + noise.sample(&mut rng)) as f32);
            }
            labels.push(class);
        }
        Dataset::new(inputs, vec![self.dim], labels, self.classes, split)
    }
}

/// Single-channel oriented-stripe textures with additive Gaussian noise.
/// Class `c` uses orientation `c * pi / classes`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TextureSpec {
    pub classes: usize,
    pub size: usize,
    pub noise: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec { classes: 2, size: 8, noise: 0.5 }
    }
}

impl TextureSpec {
    pub fn generate(&self, n: usize, seed: u64, split: Split) -> Result<Dataset> {
        if self.classes < 2 || self.size < 2 {
            return Err(Error::arg("textures need at least 2 classes and size >= 2"));
        }
        let mut rng = rng::stream(seed, &["textures".into(), split_tag(split).into()]);
        let s = self.size;
        let mut inputs = Vec::with_capacity(n * s * s);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % self.classes;
            let theta = class as f64 * std::f64::consts::PI / self.classes as f64;
            let freq = rng.random_range(0.9..1.6);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.6..1.0);
            let (dx, dy) = (theta.cos(), theta.sin());
            for y in 0..s {
                for x in 0..s {
                    let t = freq * (dx * x as f64 + dy * y as f64) + phase;
                    let z: f64 = rng.sample(StandardNormal);
                    inputs.push((amp * t.sin() + self.noise * z) as f32);
                }
            }
            labels.push(class);
        }
        Dataset::new(inputs, vec![1, s, s], labels, self.classes, split)
    }
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_labels_and_shapes() {
        assert!(Dataset::new(vec![0.0; 4], vec![2], vec![0, 2], 2, Split::Train).is_err());
        assert!(Dataset::new(vec![0.0; 5], vec![2], vec![0, 1], 2, Split::Train).is_err());
        assert!(Dataset::new(vec![], vec![2], vec![], 2, Split::Train).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let d = TextureSpec::default().generate(10, 3, Split::Test).unwrap();
        let back = Dataset::from_bytes(&d.to_bytes().unwrap()).unwrap();
        assert_eq!(back, d);
        let bytes = d.to_bytes().unwrap();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn generators_are_deterministic_and_balanced() {
        let a = BlobSpec::default().generate(100, 1, Split::Train).unwrap();
        let b = BlobSpec::default().generate(100, 1, Split::Train).unwrap();
        let c = BlobSpec::default().generate(100, 1, Split::Test).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.labels().iter().filter(|&&l| l == 0).count(), 50);
    }

    #[test]
    fn slicing_and_selection() {
        let d = BlobSpec::default().generate(10, 1, Split::Train).unwrap();
        assert_eq!(d.head(3).unwrap().len(), 3);
        assert_eq!(d.head(100).unwrap().len(), 10);
        let s = d.select(&[9, 0]).unwrap();
        assert_eq!(s.sample(0), d.sample(9));
        assert!(d.slice(4..4).is_err());
    }
}
