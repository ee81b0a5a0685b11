//! Perturbation experiments that rank layers and bins by accuracy impact.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binquant::bin_of;
use crate::net::{evaluate, Dataset, GradientStats, Network};
use crate::store::{Model, TensorData};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbKind {
    /// Additive N(0, std) noise on every weight of a layer.
    GaussianLayer,
    /// Weights of one bin scaled by (1 ± rel), random sign per element.
    RelMagnitudeBin,
    /// Every weight of a layer scaled by (1 ± rel), random sign per element.
    RelMagnitudeLayerU8,
    /// N(0, std) noise on the `fraction` of weights with the largest |gradient|.
    GradientTopK,
    /// N(0, std) noise on a uniformly random `fraction` of weights.
    RandomK,
}

impl PerturbKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PerturbKind::GaussianLayer => "GaussianLayer",
            PerturbKind::RelMagnitudeBin => "RelMagnitudeBin",
            PerturbKind::RelMagnitudeLayerU8 => "RelMagnitudeLayerU8",
            PerturbKind::GradientTopK => "GradientTopK",
            PerturbKind::RandomK => "RandomK",
        }
    }
}

/// What was perturbed and how. Only the fields relevant to `kind` are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub std: Option<f64>,
    pub rel: Option<f64>,
    pub fraction: Option<f64>,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn gaussian(std: f64, seed: u64) -> Self {
        PerturbSpec { kind: PerturbKind::GaussianLayer, std: Some(std), rel: None, fraction: None, seed }
    }

    pub fn rel_bin(rel: f64, seed: u64) -> Self {
        PerturbSpec { kind: PerturbKind::RelMagnitudeBin, std: None, rel: Some(rel), fraction: None, seed }
    }

    pub fn rel_layer(rel: f64, seed: u64) -> Self {
        PerturbSpec { kind: PerturbKind::RelMagnitudeLayerU8, std: None, rel: Some(rel), fraction: None, seed }
    }

    pub fn gradient_top_k(std: f64, fraction: f64, seed: u64) -> Self {
        PerturbSpec { kind: PerturbKind::GradientTopK, std: Some(std), rel: None, fraction: Some(fraction), seed }
    }

    pub fn random_k(std: f64, fraction: f64, seed: u64) -> Self {
        PerturbSpec { kind: PerturbKind::RandomK, std: Some(std), rel: None, fraction: Some(fraction), seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub layer: String,
    pub bin: Option<usize>,
    pub spec: PerturbSpec,
    pub baseline: f64,
    pub perturbed: f64,
    /// `baseline - perturbed`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
}

pub const CSV_HEADER: [&str; 10] =
    ["layer", "bin", "kind", "std", "rel", "fraction", "seed", "baseline", "perturbed", "delta"];

impl SensitivityReport {
    pub fn extend(&mut self, other: SensitivityReport) {
        self.rows.extend(other.rows);
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.delta).collect()
    }

    /// Mean delta over rows of `layer` with perturbation `kind`.
    pub fn mean_delta(&self, layer: &str, kind: PerturbKind) -> Option<f64> {
        let d: Vec<f64> =
            self.rows.iter().filter(|r| r.layer == layer && r.spec.kind == kind).map(|r| r.delta).collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.layer.clone(),
                r.bin.map(|b| b.to_string()).unwrap_or_default(),
                r.spec.kind.as_str().to_string(),
                opt(r.spec.std),
                opt(r.spec.rel),
                opt(r.spec.fraction),
                r.spec.seed.to_string(),
                r.baseline.to_string(),
                r.perturbed.to_string(),
                r.delta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}

/// A model prepared for repeated perturbation: the materialized network and
/// its unperturbed accuracy on the evaluation set.
#[derive(Debug, Clone)]
pub struct Baseline<'a> {
    pub model: &'a Model,
    pub network: Network,
    pub data: &'a Dataset,
    pub accuracy: f64,
}

impl<'a> Baseline<'a> {
    pub fn new(model: &'a Model, data: &'a Dataset) -> Result<Self> {
        let network = Network::from_model(model)?;
        let accuracy = evaluate(&network, data)?;
        Ok(Baseline { model, network, data, accuracy })
    }

    fn weight_name(&self, layer: &str) -> Result<String> {
        self.model
            .layer(layer)
            .ok_or_else(|| Error::Unknown(layer.to_string()))?
            .weight_ref
            .clone()
            .ok_or_else(|| Error::arg(format!("layer `{layer}` has no weights to perturb")))
    }

    /// Accuracy with the weights of `tensor` transformed by `f`; the baseline
    /// network is never modified.
    fn perturbed_accuracy(&self, tensor: &str, f: impl FnOnce(&mut [f64])) -> Result<f64> {
        let mut net = self.network.clone();
        let p = net.param_mut(tensor).ok_or_else(|| Error::Unknown(tensor.to_string()))?;
        f(&mut p.values);
        evaluate(&net, self.data)
    }

    fn row(&self, layer: &str, bin: Option<usize>, spec: PerturbSpec, perturbed: f64) -> SensitivityRow {
        SensitivityRow {
            layer: layer.to_string(),
            bin,
            spec,
            baseline: self.accuracy,
            perturbed,
            delta: self.accuracy - perturbed,
        }
    }

    /// Adds N(0, std) to every weight of each layer in turn.
    pub fn gaussian_layer_sweep(&self, layers: &[String], std: f64, seed: u64) -> Result<SensitivityReport> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::arg("std must be finite and >= 0"));
        }
        let spec = PerturbSpec::gaussian(std, seed);
        let rows = layers
            .par_iter()
            .map(|layer| {
                let tensor = self.weight_name(layer)?;
                let mut r = rng::stream(seed, &["gaussian".into(), layer.into()]);
                let acc = self.perturbed_accuracy(&tensor, |w| {
                    for v in w.iter_mut() {
                        let z: f64 = r.sample(StandardNormal);
                        *v += std * z;
                    }
                })?;
                Ok(self.row(layer, None, spec, acc))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SensitivityReport { rows })
    }

    /// Scales every weight of each layer in turn by (1 ± rel).
    pub fn layer_magnitude_sweep(&self, layers: &[String], rel: f64, seed: u64) -> Result<SensitivityReport> {
        check_rel(rel)?;
        let spec = PerturbSpec::rel_layer(rel, seed);
        let rows = layers
            .par_iter()
            .map(|layer| {
                let tensor = self.weight_name(layer)?;
                let mut r = rng::stream(seed, &["rel-layer".into(), layer.into()]);
                let acc = self.perturbed_accuracy(&tensor, |w| {
                    for v in w.iter_mut() {
                        *v *= if r.random::<bool>() { 1.0 + rel } else { 1.0 - rel };
                    }
                })?;
                Ok(self.row(layer, None, spec, acc))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SensitivityReport { rows })
    }

    /// Scales the weights of each bin of `layer` in turn by (1 ± rel). Bin
    /// membership uses the stored values (uint8 codes for U8 tensors).
    pub fn bin_magnitude_sweep(&self, layer: &str, edges: &[f64], rel: f64, seed: u64) -> Result<SensitivityReport> {
        check_rel(rel)?;
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::arg("bin edges must be strictly increasing"));
        }
        let tensor = self.weight_name(layer)?;
        let stored = stored_values(self.model, &tensor)?;
        if stored.is_empty() {
            return Err(Error::arg(format!("layer `{layer}` is empty")));
        }
        let labels: Vec<usize> = stored.iter().map(|&v| bin_of(edges, v)).collect();
        let spec = PerturbSpec::rel_bin(rel, seed);
        let rows = (0..edges.len() - 1)
            .into_par_iter()
            .map(|bin| {
                if !labels.contains(&bin) {
                    return Ok(self.row(layer, Some(bin), spec, self.accuracy));
                }
                let mut r = rng::stream(seed, &["rel-bin".into(), layer.into(), bin.into()]);
                let acc = self.perturbed_accuracy(&tensor, |w| {
                    for (v, &l) in w.iter_mut().zip(&labels) {
                        if l == bin {
                            *v *= if r.random::<bool>() { 1.0 + rel } else { 1.0 - rel };
                        }
                    }
                })?;
                Ok(self.row(layer, Some(bin), spec, acc))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SensitivityReport { rows })
    }

    /// For each layer, two rows: N(0, std) noise on a random `fraction` of the
    /// weights (RandomK), then on the `fraction` with the largest accumulated
    /// |gradient| (GradientTopK). Gradient ties keep index order.
    pub fn gradient_vs_random(
        &self,
        layers: &[String],
        grads: &GradientStats,
        std: f64,
        fraction: f64,
        seed: u64,
    ) -> Result<SensitivityReport> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::arg("std must be finite and >= 0"));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::arg("fraction must be in (0, 1]"));
        }
        let rows = layers
            .par_iter()
            .map(|layer| {
                let tensor = self.weight_name(layer)?;
                let g = grads.get(&tensor).ok_or_else(|| Error::MissingGradients(tensor.clone()))?;
                let n = self.network.values(&tensor)?.len();
                if g.len() != n {
                    return Err(Error::shape(format!("gradients of `{tensor}` have {} entries, expected {n}", g.len())));
                }
                let k = ((fraction * n as f64).round() as usize).clamp(1, n);

                let mut pick = rng::stream(seed, &["random-select".into(), layer.into()]);
                let mut random_idx = index::sample(&mut pick, n, k).into_vec();
                random_idx.sort_unstable();
                let mut noise = rng::stream(seed, &["noise-random".into(), layer.into()]);
                let acc_random = self.perturbed_accuracy(&tensor, |w| add_noise(w, &random_idx, std, &mut noise))?;

                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| g[b].total_cmp(&g[a]));
                let mut top_idx = order[..k].to_vec();
                top_idx.sort_unstable();
                let mut noise = rng::stream(seed, &["noise-gradient".into(), layer.into()]);
                let acc_top = self.perturbed_accuracy(&tensor, |w| add_noise(w, &top_idx, std, &mut noise))?;

                Ok(vec![
                    self.row(layer, None, PerturbSpec::random_k(std, fraction, seed), acc_random),
                    self.row(layer, None, PerturbSpec::gradient_top_k(std, fraction, seed), acc_top),
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SensitivityReport { rows: rows.into_iter().flatten().collect() })
    }
}

fn add_noise(w: &mut [f64], idx: &[usize], std: f64, r: &mut impl Rng) {
    for &i in idx {
        let z: f64 = r.sample(StandardNormal);
        w[i] += std * z;
    }
}

fn check_rel(rel: f64) -> Result<()> {
    if !(rel >= 0.0 && rel.is_finite()) {
        return Err(Error::arg("relative magnitude must be finite and >= 0"));
    }
    Ok(())
}

/// Values used for bin membership: raw codes for U8 tensors, floats otherwise.
pub(crate) fn stored_values(model: &Model, tensor: &str) -> Result<Vec<f64>> {
    let t = model.tensor(tensor).ok_or_else(|| Error::Unknown(tensor.to_string()))?;
    Ok(match t.data() {
        TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        TensorData::U8(v) => v.iter().map(|&u| f64::from(u)).collect(),
    })
}

/// See [`Baseline::gaussian_layer_sweep`].
pub fn gaussian_layer_sweep(
    model: &Model,
    data: &Dataset,
    layers: &[String],
    std: f64,
    seed: u64,
) -> Result<SensitivityReport> {
    Baseline::new(model, data)?.gaussian_layer_sweep(layers, std, seed)
}

/// See [`Baseline::bin_magnitude_sweep`].
pub fn bin_magnitude_sweep(
    model: &Model,
    data: &Dataset,
    layer: &str,
    edges: &[f64],
    rel: f64,
    seed: u64,
) -> Result<SensitivityReport> {
    Baseline::new(model, data)?.bin_magnitude_sweep(layer, edges, rel, seed)
}

/// See [`Baseline::layer_magnitude_sweep`].
pub fn layer_magnitude_sweep(
    model: &Model,
    data: &Dataset,
    layers: &[String],
    rel: f64,
    seed: u64,
) -> Result<SensitivityReport> {
    Baseline::new(model, data)?.layer_magnitude_sweep(layers, rel, seed)
}

/// See [`Baseline::gradient_vs_random`].
pub fn gradient_vs_random(
    model: &Model,
    data: &Dataset,
    layers: &[String],
    grads: &GradientStats,
    std: f64,
    fraction: f64,
    seed: u64,
) -> Result<SensitivityReport> {
    Baseline::new(model, data)?.gradient_vs_random(layers, grads, std, fraction, seed)
}
