//! Bin & Quant: sensitivity-guided binning of a layer's weights into a small
//! codebook of representative values, applied without retraining.
//!
//! A layer starts with bins whose edges sit at normal quantiles of its weight
//! distribution. Each round perturbs every bin, splits the one whose
//! perturbation hurts accuracy most, and stops once no bin is sensitive or the
//! bin budget is spent. The layer is then replaced by per-bin means and kept
//! only if the accuracy drop stays within the layer limit.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::net::{evaluate, Dataset, Network};
use crate::sensitivity::{stored_values, Baseline, SensitivityReport};
use crate::stats::{mean_std, norm_ppf};
use crate::store::{DType, Model, TensorData};
use crate::{rng, Error, Result};

/// Upper bound on the number of bins in a layer.
pub const MAX_BINS_LIMIT: usize = 1 << 16;

/// Bin index of `v`: the `i` with `edges[i] <= v < edges[i + 1]`. Values
/// outside the outer edges fall into the first or last bin.
pub fn bin_of(edges: &[f64], v: f64) -> usize {
    let last = edges.len().saturating_sub(2);
    edges.partition_point(|&e| e <= v).saturating_sub(1).min(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    #[serde(with = "edges_serde")]
    pub edges: Vec<f64>,
    pub representatives: Vec<f64>,
    pub member_counts: Vec<usize>,
}

impl BinSpec {
    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// A single bin holding every weight.
    pub fn is_degenerate(&self) -> bool {
        self.bins() == 1
    }

    /// Bits per label; a single-bin layer still spends one bit per weight.
    pub fn label_bits(&self) -> u32 {
        label_bits(self.bins())
    }

    /// Bounds of bin `i`.
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.edges[i], self.edges[i + 1])
    }
}

/// `max(1, ceil(log2 b))`.
pub fn label_bits(b: usize) -> u32 {
    if b <= 2 {
        1
    } else {
        usize::BITS - (b - 1).leading_zeros()
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::arg("at least two bin edges are required"));
    }
    if edges.iter().any(|e| e.is_nan()) || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::arg("bin edges must be strictly increasing"));
    }
    Ok(())
}

/// Edges at `mean + std * Φ⁻¹(k/b)` for `k = 1..b`, outer edges at ±∞.
pub fn initial_bins_invcdf(mean: f64, std: f64, b: usize) -> Result<Vec<f64>> {
    if !(std > 0.0 && std.is_finite()) || !mean.is_finite() {
        return Err(Error::arg("inverse-CDF bins need a finite mean and std > 0"));
    }
    if !(2..=MAX_BINS_LIMIT).contains(&b) {
        return Err(Error::arg(format!("bin count must be in 2..={MAX_BINS_LIMIT}")));
    }
    let mut edges = Vec::with_capacity(b + 1);
    edges.push(f64::NEG_INFINITY);
    edges.extend((1..b).map(|k| mean + std * norm_ppf(k as f64 / b as f64)));
    edges.push(f64::INFINITY);
    check_edges(&edges)?;
    Ok(edges)
}

/// Inverse-CDF edges computed on uint8 codes, clamped to the code range and
/// deduplicated. The outer edges are 0 and 256 so every code has a bin. A
/// constant buffer yields a single degenerate bin.
pub fn initial_bins_u8(codes: &[u8], b: usize) -> Result<Vec<f64>> {
    if codes.is_empty() {
        return Err(Error::arg("cannot bin an empty buffer"));
    }
    let values: Vec<f64> = codes.iter().map(|&c| f64::from(c)).collect();
    let (mean, std) = mean_std(values.iter().copied());
    u8_edges(&values, mean, std, b)
}

fn u8_edges(values: &[f64], mean: f64, std: f64, b: usize) -> Result<Vec<f64>> {
    if std == 0.0 {
        return Ok(vec![0.0, 256.0]);
    }
    let inner = initial_bins_invcdf(mean, std, b)?;
    let mut edges = vec![0.0];
    for e in &inner[1..inner.len() - 1] {
        let e = e.clamp(0.0, 255.0);
        if e > *edges.last().unwrap() {
            edges.push(e);
        }
    }
    edges.push(256.0);
    if edges.len() == 2 {
        // All interior edges collapsed onto zero; separate the largest code.
        let max = values.iter().copied().fold(0.0, f64::max);
        edges.insert(1, max);
    }
    Ok(edges)
}

/// Labels every weight by half-open interval membership and sets each
/// representative to its bin's member mean. Integer layers (uint8 codes) round
/// the mean half away from zero. Empty bins get a value inside the bin.
pub fn assign_and_represent(weights: &[f64], edges: &[f64], integer: bool) -> Result<(BinSpec, Vec<u32>)> {
    check_edges(edges)?;
    let b = edges.len() - 1;
    if b > MAX_BINS_LIMIT {
        return Err(Error::arg(format!("at most {MAX_BINS_LIMIT} bins are supported")));
    }
    let labels: Vec<u32> = weights.iter().map(|&w| bin_of(edges, w) as u32).collect();
    let mut first = vec![None::<f64>; b];
    let mut offset_sum = vec![0.0f64; b];
    let mut counts = vec![0usize; b];
    for (&w, &l) in weights.iter().zip(&labels) {
        let l = l as usize;
        counts[l] += 1;
        // Offsets from the first member keep the mean exact for identical values.
        let w0 = *first[l].get_or_insert(w);
        offset_sum[l] += w - w0;
    }
    let representatives = (0..b)
        .map(|i| match first[i] {
            Some(w0) => {
                let mean = w0 + offset_sum[i] / counts[i] as f64;
                if integer {
                    mean.round()
                } else {
                    f64::from(mean as f32)
                }
            }
            None => empty_bin_value(edges[i], edges[i + 1], integer),
        })
        .collect();
    Ok((BinSpec { edges: edges.to_vec(), representatives, member_counts: counts }, labels))
}

fn empty_bin_value(lo: f64, hi: f64, integer: bool) -> f64 {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => {
            let mid = 0.5 * (lo + hi);
            if !integer {
                return mid;
            }
            [mid.round(), lo.ceil()].into_iter().find(|c| *c >= lo && *c < hi).unwrap_or(lo)
        }
        (false, true) => hi - hi.abs().max(1.0),
        (true, false) => lo,
        (false, false) => 0.0,
    }
}

/// Per-bin deltas in bin order, checked against the bin count.
fn bin_deltas(report: &SensitivityReport, bins: usize) -> Result<Vec<f64>> {
    let mut deltas = vec![None; bins];
    for r in &report.rows {
        let i = r.bin.ok_or_else(|| Error::arg("sensitivity row without a bin index"))?;
        let slot = deltas.get_mut(i).ok_or_else(|| Error::arg(format!("bin {i} out of range")))?;
        *slot = Some(r.delta);
    }
    deltas
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| Error::arg(format!("no sensitivity row for bin {i}"))))
        .collect()
}

/// Split point for bin `i`, or `None` when its members cannot be separated.
/// Bounded bins split at their midpoint; unbounded ones at the midpoint of
/// the observed member range.
fn split_point(edges: &[f64], i: usize, weights: &[f64]) -> Option<f64> {
    let (lo, hi) = (edges[i], edges[i + 1]);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &w in weights.iter().filter(|&&w| bin_of(edges, w) == i) {
        min = min.min(w);
        max = max.max(w);
    }
    if !(min < max) {
        return None;
    }
    let s = if lo.is_finite() && hi.is_finite() {
        0.5 * (lo + hi)
    } else {
        let m = 0.5 * (min + max);
        if m > min {
            m
        } else {
            max
        }
    };
    (lo < s && s < hi).then_some(s)
}

/// Splits the bin with the largest accuracy delta in two. Ties go to the
/// lower bin index; bins whose members are all equal are passed over.
/// Returns `None` when no bin can be split.
pub fn split_most_sensitive(
    spec: &BinSpec,
    report: &SensitivityReport,
    weights: &[f64],
    integer: bool,
) -> Result<Option<(BinSpec, Vec<u32>, usize)>> {
    let deltas = bin_deltas(report, spec.bins())?;
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]));
    for i in order {
        if let Some(s) = split_point(&spec.edges, i, weights) {
            let mut edges = spec.edges.clone();
            edges.insert(i + 1, s);
            let (next, labels) = assign_and_represent(weights, &edges, integer)?;
            return Ok(Some((next, labels, i)));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BinInit {
    /// Normal quantiles of the layer's own mean and std (codes for uint8 layers).
    LayerStats,
    /// Normal quantiles of a fixed distribution.
    InvCdf { mean: f64, std: f64 },
    /// Like `LayerStats`, but the layer must hold uint8 codes.
    MeanStdU8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BqConfig {
    pub max_bins: usize,
    pub initial_bins: usize,
    /// A bin whose perturbation costs less than this (absolute accuracy) is
    /// considered insensitive.
    pub per_bin_drop_limit: f64,
    /// Largest accepted accuracy drop for a compressed layer.
    pub layer_drop_limit: f64,
    pub init: BinInit,
    pub eval_samples: usize,
    pub layers_to_try: usize,
    /// Relative perturbation for the split decision; 0.5 for float layers
    /// and 0.03 for uint8 layers when unset.
    pub rel: Option<f64>,
    /// Later layers reuse the first accepted layer's bins and values.
    pub share_bins: bool,
    pub seed: u64,
}

impl Default for BqConfig {
    fn default() -> Self {
        BqConfig {
            max_bins: 16,
            initial_bins: 8,
            per_bin_drop_limit: 0.02,
            layer_drop_limit: 0.01,
            init: BinInit::LayerStats,
            eval_samples: 1000,
            layers_to_try: usize::MAX,
            rel: None,
            share_bins: false,
            seed: 0,
        }
    }
}

impl BqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_BINS_LIMIT).contains(&self.max_bins) {
            return Err(Error::arg(format!("max_bins must be in 2..={MAX_BINS_LIMIT}")));
        }
        if self.initial_bins < 2 {
            return Err(Error::arg("initial_bins must be at least 2"));
        }
        if self.eval_samples == 0 {
            return Err(Error::arg("eval_samples must be positive"));
        }
        for (name, v) in [("per_bin_drop_limit", self.per_bin_drop_limit), ("layer_drop_limit", self.layer_drop_limit)] {
            if !v.is_finite() {
                return Err(Error::arg(format!("{name} must be finite")));
            }
        }
        if let Some(rel) = self.rel {
            if !(rel > 0.0 && rel.is_finite()) {
                return Err(Error::arg("rel must be positive"));
            }
        }
        Ok(())
    }
}

/// One round of the split loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BqStep {
    pub bins: usize,
    pub deltas: Vec<f64>,
    pub split: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BqLayerResult {
    pub layer: String,
    pub tensor: String,
    pub dtype: DType,
    pub bin_spec: BinSpec,
    #[serde(skip)]
    pub labels: Vec<u32>,
    pub baseline_accuracy: f64,
    pub accuracy_after: f64,
    pub accepted: bool,
    pub shared: bool,
    pub trace: Vec<BqStep>,
}

impl BqLayerResult {
    pub fn drop(&self) -> f64 {
        self.baseline_accuracy - self.accuracy_after
    }
}

fn initial_edges(values: &[f64], integer: bool, init: BinInit, b: usize) -> Result<Vec<f64>> {
    match init {
        BinInit::InvCdf { mean, std } => {
            let edges = initial_bins_invcdf(mean, std, b)?;
            if integer {
                u8_edges(values, mean, std, b)
            } else {
                Ok(edges)
            }
        }
        BinInit::MeanStdU8 if !integer => Err(Error::arg("mean/std uint8 init needs a uint8 layer")),
        BinInit::LayerStats | BinInit::MeanStdU8 => {
            let (mean, std) = mean_std(values.iter().copied());
            if integer {
                u8_edges(values, mean, std, b)
            } else if std == 0.0 {
                Ok(vec![f64::NEG_INFINITY, f64::INFINITY])
            } else {
                initial_bins_invcdf(mean, std, b)
            }
        }
    }
}

/// Replaces the weights of `layer` by their bin representatives.
pub fn apply_bins(model: &Model, layer: &str, spec: &BinSpec, labels: &[u32]) -> Result<Model> {
    let tensor = model.layer_weight(layer)?.name.clone();
    let t = model.tensor(&tensor).expect("weight tensor exists");
    if labels.len() != t.len() || labels.iter().any(|&l| l as usize >= spec.bins()) {
        return Err(Error::arg(format!("labels do not fit `{tensor}`")));
    }
    let data = match t.dtype() {
        DType::F32 => TensorData::F32(labels.iter().map(|&l| spec.representatives[l as usize] as f32).collect()),
        DType::U8 => {
            TensorData::U8(labels.iter().map(|&l| spec.representatives[l as usize].clamp(0.0, 255.0) as u8).collect())
        }
    };
    let mut out = model.clone();
    *out.tensor_mut(&tensor).expect("weight tensor exists") = t.with_data(data)?;
    Ok(out)
}

/// Runs the split loop on one layer and gates the result against the model's
/// current accuracy on `data`.
pub fn compress_layer(model: &Model, data: &Dataset, layer: &str, cfg: &BqConfig) -> Result<BqLayerResult> {
    compress_layer_with(model, data, layer, cfg, None)
}

/// Like [`compress_layer`]; with a donor spec the layer reuses the donor's
/// edges and representatives instead of searching for its own.
pub fn compress_layer_with(
    model: &Model,
    data: &Dataset,
    layer: &str,
    cfg: &BqConfig,
    donor: Option<&BinSpec>,
) -> Result<BqLayerResult> {
    cfg.validate()?;
    let baseline = Baseline::new(model, data)?;
    let tensor = model.layer_weight(layer)?;
    let (tensor_name, dtype) = (tensor.name.clone(), tensor.dtype());
    let integer = dtype == DType::U8;
    let values = stored_values(model, &tensor_name)?;
    let rel = cfg.rel.unwrap_or(if integer { 0.03 } else { 0.5 });
    let mut trace = Vec::new();

    let (spec, labels) = if let Some(donor) = donor {
        let labels = values.iter().map(|&w| bin_of(&donor.edges, w) as u32).collect::<Vec<_>>();
        let mut spec = donor.clone();
        spec.member_counts = vec![0; spec.bins()];
        for &l in &labels {
            spec.member_counts[l as usize] += 1;
        }
        (spec, labels)
    } else {
        let b = cfg.initial_bins.min(cfg.max_bins);
        let edges = initial_edges(&values, integer, cfg.init, b)?;
        let (mut spec, mut labels) = assign_and_represent(&values, &edges, integer)?;
        let mut round = 0u64;
        while spec.bins() < cfg.max_bins {
            let seed = rng::derive_seed(cfg.seed, &["bq".into(), layer.into(), round.into()]);
            let report = baseline.bin_magnitude_sweep(layer, &spec.edges, rel, seed)?;
            let deltas = bin_deltas(&report, spec.bins())?;
            if deltas.iter().all(|&d| d < cfg.per_bin_drop_limit) {
                trace.push(BqStep { bins: spec.bins(), deltas, split: None });
                break;
            }
            match split_most_sensitive(&spec, &report, &values, integer)? {
                Some((next, next_labels, i)) => {
                    trace.push(BqStep { bins: spec.bins(), deltas, split: Some(i) });
                    spec = next;
                    labels = next_labels;
                }
                None => {
                    trace.push(BqStep { bins: spec.bins(), deltas, split: None });
                    break;
                }
            }
            round += 1;
        }
        (spec, labels)
    };

    let compressed = apply_bins(model, layer, &spec, &labels)?;
    let accuracy_after = evaluate(&Network::from_model(&compressed)?, data)?;
    let accepted = baseline.accuracy - accuracy_after <= cfg.layer_drop_limit;
    Ok(BqLayerResult {
        layer: layer.to_string(),
        tensor: tensor_name,
        dtype,
        bin_spec: spec,
        labels,
        baseline_accuracy: baseline.accuracy,
        accuracy_after,
        accepted,
        shared: donor.is_some(),
        trace,
    })
}

#[derive(Debug, Clone)]
pub struct BqModelResult {
    pub layers: Vec<BqLayerResult>,
    /// Input model with every accepted layer replaced by its representatives.
    pub model: Model,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub eval_samples: usize,
}

/// JSON-friendly summary of a model compression run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BqSummary {
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub eval_samples: usize,
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    pub layers: Vec<BqLayerResult>,
}

impl BqModelResult {
    pub fn accepted(&self) -> impl Iterator<Item = &BqLayerResult> {
        self.layers.iter().filter(|l| l.accepted)
    }

    pub fn summary(&self) -> BqSummary {
        let names = |accepted: bool| {
            self.layers.iter().filter(|l| l.accepted == accepted).map(|l| l.layer.clone()).collect()
        };
        BqSummary {
            baseline_accuracy: self.baseline_accuracy,
            final_accuracy: self.final_accuracy,
            eval_samples: self.eval_samples,
            accepted: names(true),
            rejected: names(false),
            layers: self.layers.clone(),
        }
    }
}

/// Seeded subset of `eval_samples` examples (the whole set if smaller),
/// kept in dataset order.
pub fn eval_subset(data: &Dataset, eval_samples: usize, seed: u64) -> Result<Dataset> {
    if eval_samples >= data.len() {
        return Ok(data.clone());
    }
    let mut r = rng::stream(seed, &["eval-subset".into()]);
    let mut idx = index::sample(&mut r, data.len(), eval_samples).into_vec();
    idx.sort_unstable();
    data.select(&idx)
}

/// Compresses layers in descending parameter count, up to
/// `cfg.layers_to_try`. Each layer is gated against the accuracy of the model
/// with all earlier acceptances applied, so the gates compose.
pub fn compress_model(model: &Model, data: &Dataset, cfg: &BqConfig) -> Result<BqModelResult> {
    cfg.validate()?;
    let eval = eval_subset(data, cfg.eval_samples, cfg.seed)?;
    let baseline_accuracy = evaluate(&Network::from_model(model)?, &eval)?;
    let mut current = model.clone();
    let mut layers = Vec::new();
    let mut donor: Option<(DType, BinSpec)> = None;
    for layer in model.layers_by_param_count().into_iter().take(cfg.layers_to_try) {
        let dtype = current.layer_weight(&layer)?.dtype();
        let shared = donor.as_ref().filter(|(d, _)| *d == dtype).map(|(_, s)| s);
        let result = compress_layer_with(&current, &eval, &layer, cfg, shared)?;
        log::info!(
            "layer {layer}: {} bins, accuracy {:.4} -> {:.4}, {}",
            result.bin_spec.bins(),
            result.baseline_accuracy,
            result.accuracy_after,
            if result.accepted { "accepted" } else { "rejected" }
        );
        if result.accepted {
            current = apply_bins(&current, &layer, &result.bin_spec, &result.labels)?;
            if cfg.share_bins && donor.is_none() {
                donor = Some((dtype, result.bin_spec.clone()));
            }
        }
        layers.push(result);
    }
    let final_accuracy = evaluate(&Network::from_model(&current)?, &eval)?;
    Ok(BqModelResult { layers, model: current, baseline_accuracy, final_accuracy, eval_samples: eval.len() })
}

/// Infinite edges are written as the strings "inf" and "-inf".
mod edges_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Edge {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(edges: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let out: Vec<Edge> = edges
            .iter()
            .map(|&e| match e {
                f64::INFINITY => Edge::Text("inf".into()),
                f64::NEG_INFINITY => Edge::Text("-inf".into()),
                e => Edge::Num(e),
            })
            .collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Edge>::deserialize(d)?
            .into_iter()
            .map(|e| match e {
                Edge::Num(v) => Ok(v),
                Edge::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Edge::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
                Edge::Text(t) => Err(serde::de::Error::custom(format!("bad bin edge `{t}`"))),
            })
            .collect()
    }
}
