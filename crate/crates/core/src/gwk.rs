//! Gradient-weighted k-means over product-quantized weight blocks.
//!
//! Weights are cut into `d`-length blocks, each block gets a scalar weight
//! from its mean accumulated |gradient|, and Lloyd's algorithm clusters the
//! blocks with centroids pulled toward high-gradient blocks. Between training
//! epochs the layer is rebuilt from centroids and labels and training
//! continues from there.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binquant::label_bits;
use crate::net::{deploy, evaluate, train_from_epoch, Dataset, EpochMetrics, Momentum, Network, TrainConfig};
use crate::qat::{QatConfig, UniformQuantizer};
use crate::store::{LayerDesc, LayerKind, Model};
use crate::{rng, Error, Result};

/// A weight tensor cut into consecutive `d`-length blocks.
///
/// Conv weights are stored `[c_out, c_in, k, k]`, so their row-major order is
/// already the column-major order of the `(c_in·k·k) × c_out` matrix; dense
/// weights `[out, in]` are taken row-major. The tail is zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    pub tensor: String,
    pub shape: Vec<usize>,
    pub d: usize,
    pub n_blocks: usize,
    /// Zero entries appended to fill the last block.
    pub pad: usize,
    /// Block `j` is `data[j*d..(j+1)*d]`.
    pub data: Vec<f64>,
}

impl BlockMatrix {
    pub fn block(&self, j: usize) -> &[f64] {
        &self.data[j * self.d..(j + 1) * self.d]
    }

    pub fn weight_count(&self) -> usize {
        self.n_blocks * self.d - self.pad
    }

    /// Real (unpadded) entries of block `j`.
    fn real_len(&self, j: usize) -> usize {
        let end = ((j + 1) * self.d).min(self.weight_count());
        end.saturating_sub(j * self.d)
    }
}

pub fn pq_reshape(tensor: &str, shape: &[usize], values: &[f64], d: usize) -> Result<BlockMatrix> {
    if d == 0 {
        return Err(Error::arg("block size must be at least 1"));
    }
    let n: usize = shape.iter().product();
    if n != values.len() || n == 0 {
        return Err(Error::shape(format!("`{tensor}` has {} values for shape {shape:?}", values.len())));
    }
    let n_blocks = n.div_ceil(d);
    let pad = n_blocks * d - n;
    let mut data = values.to_vec();
    data.resize(n_blocks * d, 0.0);
    Ok(BlockMatrix { tensor: tensor.to_string(), shape: shape.to_vec(), d, n_blocks, pad, data })
}

/// Inverse of [`pq_reshape`]: the weights in their original order.
pub fn pq_inverse(blocks: &BlockMatrix) -> Vec<f64> {
    blocks.data[..blocks.weight_count()].to_vec()
}

/// Per-block scalar weights, normalized to sum 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub g: Vec<f64>,
    /// Set when every gradient was zero and uniform weights were used.
    pub uniform_fallback: bool,
}

/// Relative floor applied to block weights before normalization.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Mean |gradient| over the real positions of each block, floored at
/// `1e-12 · max` and L1-normalized. All-zero gradients give uniform weights.
pub fn reduce_gradients(grads: &[f64], blocks: &BlockMatrix) -> Result<BlockWeights> {
    if grads.len() != blocks.weight_count() {
        return Err(Error::shape(format!(
            "gradients for `{}` have {} entries, expected {}",
            blocks.tensor,
            grads.len(),
            blocks.weight_count()
        )));
    }
    let mut g: Vec<f64> = (0..blocks.n_blocks)
        .map(|j| {
            let start = j * blocks.d;
            let len = blocks.real_len(j);
            grads[start..start + len].iter().map(|v| v.abs()).sum::<f64>() / len as f64
        })
        .collect();
    let max = g.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        log::warn!("`{}`: gradients are all zero, using uniform block weights", blocks.tensor);
        let u = 1.0 / blocks.n_blocks as f64;
        return Ok(BlockWeights { g: vec![u; blocks.n_blocks], uniform_fallback: true });
    }
    let floor = WEIGHT_FLOOR * max;
    for v in g.iter_mut() {
        *v = v.max(floor);
    }
    let sum: f64 = g.iter().sum();
    for v in g.iter_mut() {
        *v /= sum;
    }
    Ok(BlockWeights { g, uniform_fallback: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqCodebook {
    pub d: usize,
    /// Centroid `c` is `centroids[c*d..(c+1)*d]`.
    pub centroids: Vec<f64>,
    pub labels: Vec<u32>,
}

impl PqCodebook {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len() / self.d
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.d..(c + 1) * self.d]
    }

    /// Block data rebuilt from centroids and labels.
    pub fn reconstruct(&self) -> Vec<f64> {
        self.labels.iter().flat_map(|&l| self.centroid(l as usize).iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KmeansInit {
    /// Weighted k-means++: each new centroid drawn with probability ∝ g·dist².
    PlusPlus,
    /// Start from these centroids (`b·d` values).
    Centroids(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansConfig {
    pub max_iter: usize,
    /// Stop once the relative objective improvement falls below this.
    pub tol: f64,
    pub seed: u64,
    pub init: KmeansInit,
    /// Ablation: plain member means instead of gradient-weighted ones.
    pub uniform_weights: bool,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig { max_iter: 100, tol: 1e-6, seed: 0, init: KmeansInit::PlusPlus, uniform_weights: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub codebook: PqCodebook,
    /// Weighted objective after initial assignment and after each iteration.
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

impl KmeansResult {
    pub fn objective(&self) -> f64 {
        *self.objectives.last().unwrap()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Σ g_i · ‖w_i − c_{l(i)}‖².
pub fn weighted_objective(blocks: &BlockMatrix, g: &[f64], codebook: &PqCodebook) -> f64 {
    (0..blocks.n_blocks).map(|j| g[j] * dist2(blocks.block(j), codebook.centroid(codebook.labels[j] as usize))).sum()
}

/// Nearest centroid by plain Euclidean distance; ties go to the lower index.
fn nearest(block: &[f64], centroids: &[f64], d: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(d).enumerate() {
        let dd = dist2(block, centroid);
        if dd < best.1 {
            best = (c as u32, dd);
        }
    }
    best
}

/// Draws an index with probability proportional to `weights`.
fn draw(weights: &[f64], r: &mut impl Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let u = r.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Some(i);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

fn plus_plus(blocks: &BlockMatrix, g: &[f64], b: usize, seed: u64) -> Vec<f64> {
    let d = blocks.d;
    let mut r = rng::stream(seed, &["kmeans++".into()]);
    let first = draw(g, &mut r).unwrap_or(0);
    let mut centroids = blocks.block(first).to_vec();
    let mut best: Vec<f64> = (0..blocks.n_blocks).map(|j| dist2(blocks.block(j), blocks.block(first))).collect();
    while centroids.len() < b * d {
        let scores: Vec<f64> = g.iter().zip(&best).map(|(gi, dd)| gi * dd).collect();
        // Fewer distinct blocks than clusters: fall back to the gradient weights.
        let next = draw(&scores, &mut r).or_else(|| draw(g, &mut r)).unwrap_or(0);
        let c = blocks.block(next).to_vec();
        for (j, bj) in best.iter_mut().enumerate() {
            *bj = bj.min(dist2(blocks.block(j), &c));
        }
        centroids.extend(c);
    }
    centroids
}

/// Lloyd iterations with gradient-weighted centroid updates
/// `c = Σ g_i w_i / Σ g_i` over each cluster's members.
///
/// Empty clusters are reseeded to the block with the largest weighted
/// distance to its centroid. The weighted objective never increases; this is
/// checked every iteration. With `uniform_weights` every block weighs 1 for
/// seeding, updates, reseeding and stopping, while `objectives` still
/// reports the gradient-weighted value.
pub fn weighted_kmeans(blocks: &BlockMatrix, g: &[f64], b: usize, cfg: &KmeansConfig) -> Result<KmeansResult> {
    let (n, d) = (blocks.n_blocks, blocks.d);
    if g.len() != n {
        return Err(Error::shape(format!("{} block weights for {n} blocks", g.len())));
    }
    if b == 0 || b > n {
        return Err(Error::arg(format!("cannot form {b} clusters from {n} blocks")));
    }
    if g.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::arg("block weights must be finite and non-negative"));
    }
    // The ablation ignores the gradient weights everywhere except the reported objective.
    let ones;
    let w: &[f64] = if cfg.uniform_weights {
        ones = vec![1.0; n];
        &ones
    } else {
        g
    };
    let mut centroids = match &cfg.init {
        KmeansInit::PlusPlus => plus_plus(blocks, w, b, cfg.seed),
        KmeansInit::Centroids(c) => {
            if c.len() != b * d || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("initial centroids must be {b}x{d} finite values")));
            }
            c.clone()
        }
    };

    let mut labels = vec![0u32; n];
    let mut dists = vec![0.0; n];
    let assign = |centroids: &[f64], labels: &mut [u32], dists: &mut [f64]| {
        labels.par_iter_mut().zip(dists.par_iter_mut()).enumerate().for_each(|(j, (l, dd))| {
            (*l, *dd) = nearest(blocks.block(j), centroids, d);
        });
    };
    let objective = |dists: &[f64]| -> f64 { g.iter().zip(dists).map(|(gi, dd)| gi * dd).sum() };
    // The quantity the updates minimize; differs from `objective` only in the ablation.
    let minimized = |dists: &[f64]| -> f64 { w.iter().zip(dists).map(|(wi, dd)| wi * dd).sum() };

    assign(&centroids, &mut labels, &mut dists);
    let mut objectives = vec![objective(&dists)];
    let mut current = minimized(&dists);
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        // Update: offsets from the first member keep identical members exact.
        let mut first = vec![None::<usize>; b];
        let mut mass = vec![0.0f64; b];
        let mut offset = vec![0.0f64; b * d];
        for j in 0..n {
            let c = labels[j] as usize;
            let w0 = *first[c].get_or_insert(j);
            let gj = w[j];
            mass[c] += gj;
            for k in 0..d {
                offset[c * d + k] += gj * (blocks.data[j * d + k] - blocks.data[w0 * d + k]);
            }
        }
        for c in 0..b {
            if let Some(w0) = first[c] {
                for k in 0..d {
                    let base = blocks.data[w0 * d + k];
                    centroids[c * d + k] = if mass[c] > 0.0 { base + offset[c * d + k] / mass[c] } else { base };
                }
            }
        }
        for (j, dd) in dists.iter_mut().enumerate() {
            *dd = dist2(blocks.block(j), &centroids[labels[j] as usize * d..(labels[j] as usize + 1) * d]);
        }
        // Reseed empty clusters onto the worst-served blocks.
        for c in (0..b).filter(|&c| first[c].is_none()) {
            let (j, score) = (0..n)
                .map(|j| (j, w[j] * dists[j]))
                .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if score > 0.0 {
                centroids[c * d..(c + 1) * d].copy_from_slice(blocks.block(j));
                labels[j] = c as u32;
                dists[j] = 0.0;
            }
        }
        let updated = minimized(&dists);
        assign(&centroids, &mut labels, &mut dists);
        let next = minimized(&dists);
        let slack = 1e-12 * current.abs() + 1e-300;
        assert!(
            updated <= current + slack && next <= updated + slack,
            "k-means objective increased: {current} -> {updated} -> {next}"
        );
        let prev = current;
        current = next;
        objectives.push(objective(&dists));
        if prev - current <= cfg.tol * prev {
            break;
        }
    }
    if centroids.iter().any(|v| v.is_nan()) {
        return Err(Error::arg("k-means produced a NaN centroid"));
    }
    Ok(KmeansResult { codebook: PqCodebook { d, centroids, labels }, objectives, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PqConfig {
    /// Block size for regular conv and dense layers.
    pub d_conv: usize,
    /// Block size for point-wise (1×1) conv layers.
    pub d_pw: usize,
    pub n_clusters: usize,
    pub epochs_between_cluster: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub uniform_weights: bool,
    /// Leave the first and last weight layers unclustered.
    pub exempt_first_last: bool,
}

impl Default for PqConfig {
    fn default() -> Self {
        PqConfig {
            d_conv: 4,
            d_pw: 2,
            n_clusters: 16,
            epochs_between_cluster: 1,
            max_iter: 100,
            tol: 1e-6,
            uniform_weights: false,
            exempt_first_last: false,
        }
    }
}

impl PqConfig {
    /// `n_clusters = 2^bits`.
    pub fn with_bits(d_conv: usize, d_pw: usize, bits: u32) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::arg("cluster bits must be in 1..=16"));
        }
        Ok(PqConfig { d_conv, d_pw, n_clusters: 1 << bits, ..PqConfig::default() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_conv == 0 || self.d_pw == 0 {
            return Err(Error::arg("block sizes must be positive"));
        }
        if self.n_clusters < 1 || self.epochs_between_cluster == 0 {
            return Err(Error::arg("n_clusters and epochs_between_cluster must be positive"));
        }
        Ok(())
    }

    pub fn block_size(&self, layer: &LayerDesc) -> usize {
        if layer.kind == LayerKind::Conv2D && layer.pointwise {
            self.d_pw
        } else {
            self.d_conv
        }
    }
}

/// Final codebook of one clustered layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwkLayer {
    pub layer: String,
    pub tensor: String,
    pub shape: Vec<usize>,
    pub d: usize,
    pub pad: usize,
    pub codebook: PqCodebook,
}

impl GwkLayer {
    pub fn n_blocks(&self) -> usize {
        self.codebook.labels.len()
    }

    pub fn weight_count(&self) -> usize {
        self.n_blocks() * self.d - self.pad
    }

    /// Weights rebuilt from the codebook, in tensor order.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = self.codebook.reconstruct();
        w.truncate(self.weight_count());
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwkEpoch {
    /// Training metrics; the test accuracy is measured before clustering.
    pub metrics: EpochMetrics,
    /// Evaluation accuracy of the deployed network after clustering.
    pub clustered_accuracy: Option<f64>,
    /// Weighted objective per clustered layer after this epoch's clustering.
    pub objectives: BTreeMap<String, f64>,
    pub kmeans_iterations: BTreeMap<String, usize>,
    pub warm_start: bool,
}

#[derive(Debug, Clone)]
pub struct GwkOutcome {
    /// Deployed model: centroid weights on the quantization grid, activation
    /// quantizers in the manifest.
    pub model: Model,
    pub layers: Vec<GwkLayer>,
    pub trace: Vec<GwkEpoch>,
}

impl GwkOutcome {
    pub fn bits_per_weight(&self) -> Result<BpwReport> {
        bits_per_weight(&layer_storage(&self.model, &self.layers)?)
    }
}

/// Which layers get clustered, with their block sizes.
fn clustered_layers(model: &Model, pq: &PqConfig) -> Vec<(LayerDesc, usize)> {
    let layers: Vec<&LayerDesc> = model.weight_layers().collect();
    let last = layers.len().saturating_sub(1);
    layers
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !(pq.exempt_first_last && (*i == 0 || *i == last)))
        .map(|(_, l)| (l.clone(), pq.block_size(l)))
        .collect()
}

/// Trains with QAT and re-clusters every `epochs_between_cluster` epochs,
/// continuing each time from the reconstructed weights. The first clustering
/// of a layer uses k-means++; later ones warm-start from the previous
/// centroids. Cluster counts above a layer's block count are clamped.
///
/// After the last epoch centroids are snapped to the layer's weight grid and
/// frozen. On a non-finite loss the error carries the last model whose epoch
/// completed cleanly.
pub fn gwk_train(
    model: &Model,
    data: &Dataset,
    pq: &PqConfig,
    qat: &QatConfig,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<GwkOutcome> {
    pq.validate()?;
    qat.validate()?;
    cfg.validate()?;
    let targets = clustered_layers(model, pq);
    let mut latent = Network::from_model(model)?;
    let mut momentum = Momentum::default();
    let mut codebooks: BTreeMap<String, PqCodebook> = BTreeMap::new();
    let mut trace = Vec::new();
    let mut epoch = 0;
    while epoch < cfg.epochs {
        let span = pq.epochs_between_cluster.min(cfg.epochs - epoch);
        let step_cfg = TrainConfig { epochs: span, ..cfg.clone() };
        let outcome = match train_from_epoch(&latent, data, &step_cfg, Some(qat), eval, epoch, &mut momentum) {
            Ok(o) => o,
            Err(Error::Diverged { epoch, loss }) => {
                let checkpoint = Box::new(deploy(&latent, qat)?.to_model()?);
                return Err(Error::DivergedWithCheckpoint { epoch, loss, checkpoint });
            }
            Err(e) => return Err(e),
        };
        let warm_start = !codebooks.is_empty();
        let results = targets
            .par_iter()
            .map(|(layer, d)| {
                let tensor = layer.weight_ref.as_deref().unwrap();
                let p = outcome.network.param(tensor).ok_or_else(|| Error::Unknown(tensor.to_string()))?;
                let blocks = pq_reshape(tensor, &p.shape, &p.values, *d)?;
                let grads = outcome.gradients.get(tensor).ok_or_else(|| Error::MissingGradients(tensor.to_string()))?;
                let g = reduce_gradients(grads, &blocks)?;
                let b = pq.n_clusters.min(blocks.n_blocks);
                let init = match codebooks.get(&layer.name) {
                    Some(prev) => KmeansInit::Centroids(prev.centroids.clone()),
                    None => KmeansInit::PlusPlus,
                };
                let kcfg = KmeansConfig {
                    max_iter: pq.max_iter,
                    tol: pq.tol,
                    seed: rng::derive_seed(cfg.seed, &["gwk".into(), layer.name.as_str().into(), epoch.into()]),
                    init,
                    uniform_weights: pq.uniform_weights,
                };
                let km = weighted_kmeans(&blocks, &g.g, b, &kcfg)?;
                Ok((layer.name.clone(), tensor.to_string(), blocks, km))
            })
            .collect::<Result<Vec<_>>>()?;

        latent = outcome.network;
        let mut objectives = BTreeMap::new();
        let mut iterations = BTreeMap::new();
        for (layer, tensor, blocks, km) in results {
            let rebuilt = BlockMatrix { data: km.codebook.reconstruct(), ..blocks };
            latent.set_values(&tensor, pq_inverse(&rebuilt))?;
            objectives.insert(layer.clone(), km.objective());
            iterations.insert(layer.clone(), km.iterations);
            codebooks.insert(layer, km.codebook);
        }
        let clustered_accuracy = match eval {
            Some(d) => Some(evaluate(&deploy(&latent, qat)?, d)?),
            None => None,
        };
        let last = outcome.epochs.last().cloned().expect("at least one epoch ran");
        log::info!("epoch {}: loss {:.4}, train accuracy {:.4}", last.epoch, last.loss, last.train_accuracy);
        trace.push(GwkEpoch { metrics: last, clustered_accuracy, objectives, kmeans_iterations: iterations, warm_start });
        epoch += span;
    }

    // Freeze: snap centroids to the weight grid at storage precision.
    let mut layers = Vec::new();
    for (layer, d) in &targets {
        let tensor = layer.weight_ref.clone().unwrap();
        let p = latent.param(&tensor).unwrap();
        let shape = p.shape.clone();
        let mut codebook = match codebooks.remove(&layer.name) {
            Some(c) => c,
            None => {
                // No epoch ran: every block is its own centroid.
                let blocks = pq_reshape(&tensor, &shape, &p.values, *d)?;
                let mut seen: Vec<&[f64]> = Vec::new();
                let mut labels = Vec::with_capacity(blocks.n_blocks);
                for j in 0..blocks.n_blocks {
                    let pos = seen.iter().position(|c| *c == blocks.block(j)).unwrap_or_else(|| {
                        seen.push(blocks.block(j));
                        seen.len() - 1
                    });
                    labels.push(pos as u32);
                }
                let centroids = seen.concat();
                PqCodebook { d: *d, centroids, labels }
            }
        };
        let clip = qat
            .weight_clips
            .get(&layer.name)
            .ok_or_else(|| Error::arg(format!("no weight clip range for layer `{}`", layer.name)))?;
        let q = UniformQuantizer::new(qat.weight_bits, *clip)?;
        for c in codebook.centroids.iter_mut() {
            *c = f64::from(q.quantize(*c) as f32);
        }
        let n = shape.iter().product::<usize>();
        let pad = n.div_ceil(*d) * d - n;
        let gl = GwkLayer { layer: layer.name.clone(), tensor: tensor.clone(), shape, d: *d, pad, codebook };
        latent.set_values(&tensor, gl.weights())?;
        layers.push(gl);
    }
    let model = deploy(&latent, qat)?.to_model()?;
    Ok(GwkOutcome { model, layers, trace })
}

/// Storage of one layer for bits-per-weight accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerStorage {
    Pq { layer: String, weight_count: usize, n_blocks: usize, d: usize, n_clusters: usize },
    /// Per-weight labels into `bins` scalar values of `value_bits` each.
    Bins { layer: String, weight_count: usize, bins: usize, value_bits: usize },
    Native { layer: String, weight_count: usize, bits: usize },
}

impl LayerStorage {
    pub fn layer(&self) -> &str {
        match self {
            LayerStorage::Pq { layer, .. } | LayerStorage::Bins { layer, .. } | LayerStorage::Native { layer, .. } => {
                layer
            }
        }
    }

    pub fn weight_count(&self) -> usize {
        match self {
            LayerStorage::Pq { weight_count, .. }
            | LayerStorage::Bins { weight_count, .. }
            | LayerStorage::Native { weight_count, .. } => *weight_count,
        }
    }

    /// Label (or native value) bits.
    pub fn label_bits(&self) -> usize {
        match self {
            LayerStorage::Pq { n_blocks, n_clusters, .. } => n_blocks * label_bits(*n_clusters) as usize,
            LayerStorage::Bins { weight_count, bins, .. } => weight_count * label_bits(*bins) as usize,
            LayerStorage::Native { weight_count, bits, .. } => weight_count * bits,
        }
    }

    /// Codebook bits: 32-bit float centroids, or the stored bin values.
    pub fn codebook_bits(&self) -> usize {
        match self {
            LayerStorage::Pq { d, n_clusters, .. } => d * n_clusters * 32,
            LayerStorage::Bins { bins, value_bits, .. } => bins * value_bits,
            LayerStorage::Native { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBpw {
    pub layer: String,
    pub bpw: f64,
    pub label_bpw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpwReport {
    pub layers: Vec<LayerBpw>,
    /// Labels plus codebooks over all weights, native layers included.
    pub total: f64,
    /// Label bits of compressed layers over their weight count.
    pub label_only: f64,
}

/// `(Σ n_blocks·ceil(log2 b) + Σ d·b·32) / Σ weight_count`, with
/// uncompressed layers contributing their native bits.
pub fn bits_per_weight(layers: &[LayerStorage]) -> Result<BpwReport> {
    let pq: Vec<&LayerStorage> = layers.iter().filter(|l| !matches!(l, LayerStorage::Native { .. })).collect();
    if pq.is_empty() {
        return Err(Error::arg("bits per weight needs at least one compressed layer"));
    }
    let ratio = |num: usize, den: usize| num as f64 / den as f64;
    let total_bits: usize = layers.iter().map(|l| l.label_bits() + l.codebook_bits()).sum();
    let total_weights: usize = layers.iter().map(LayerStorage::weight_count).sum();
    let pq_labels: usize = pq.iter().map(|l| l.label_bits()).sum();
    let pq_weights: usize = pq.iter().map(|l| l.weight_count()).sum();
    Ok(BpwReport {
        layers: layers
            .iter()
            .map(|l| LayerBpw {
                layer: l.layer().to_string(),
                bpw: ratio(l.label_bits() + l.codebook_bits(), l.weight_count()),
                label_bpw: ratio(l.label_bits(), l.weight_count()),
            })
            .collect(),
        total: ratio(total_bits, total_weights),
        label_only: ratio(pq_labels, pq_weights),
    })
}

/// Storage description of every weight layer of `model`, clustered ones
/// taken from `layers`.
pub fn layer_storage(model: &Model, layers: &[GwkLayer]) -> Result<Vec<LayerStorage>> {
    model
        .weight_layers()
        .map(|l| {
            let t = model.layer_weight(&l.name)?;
            Ok(match layers.iter().find(|g| g.layer == l.name) {
                Some(g) => LayerStorage::Pq {
                    layer: l.name.clone(),
                    weight_count: t.len(),
                    n_blocks: g.n_blocks(),
                    d: g.d,
                    n_clusters: g.codebook.n_clusters(),
                },
                None => LayerStorage::Native { layer: l.name.clone(), weight_count: t.len(), bits: t.dtype().bits() },
            })
        })
        .collect()
}
