use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::network::{Gradients, Network};
use crate::qat::{ClipRange, QatConfig, UniformQuantizer};
use crate::store::{ActQuant, LayerKind};
use crate::{rng, stats, Error, Result};

/// SGD-with-momentum settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, epochs: 10, batch_size: 32, seed: 0, momentum: 0.9 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Sums of |gradient| per weight tensor over the batches of one epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientStats {
    pub sums: BTreeMap<String, Vec<f64>>,
    pub batch_count: usize,
}

impl GradientStats {
    fn for_network(net: &Network) -> Self {
        let sums = weight_names(net)
            .into_iter()
            .map(|n| {
                let len = net.param(&n).unwrap().values.len();
                (n, vec![0.0; len])
            })
            .collect();
        GradientStats { sums, batch_count: 0 }
    }

    fn accumulate(&mut self, grads: &Gradients) {
        for (name, sum) in self.sums.iter_mut() {
            if let Some(g) = grads.get(name) {
                for (s, v) in sum.iter_mut().zip(g) {
                    *s += v.abs();
                }
            }
        }
        self.batch_count += 1;
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.sums.get(name).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Latent (unquantized) weights.
    pub network: Network,
    /// |gradient| sums from the final epoch.
    pub gradients: GradientStats,
    pub epochs: Vec<EpochMetrics>,
}

/// Weight tensor names of Dense/Conv layers, in manifest order.
pub(crate) fn weight_names(net: &Network) -> Vec<String> {
    net.manifest().layers.iter().filter_map(|l| l.weight_ref.clone()).collect()
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    let preds = net.predict_batch(data.inputs())?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `net` with mini-batch SGD and momentum. With `qat`, weights and
/// activations are fake-quantized in the forward pass and gradients are
/// mapped back through the configured scaling rule. `eval` adds a test
/// accuracy column to the per-epoch metrics.
pub fn train(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    qat: Option<&QatConfig>,
    eval: Option<&Dataset>,
) -> Result<TrainOutcome> {
    train_from_epoch(net, data, cfg, qat, eval, 0, &mut Momentum::default())
}

/// Optimizer state carried between calls of [`train_from_epoch`].
#[derive(Debug, Clone, Default)]
pub(crate) struct Momentum(Vec<Vec<f64>>);

/// Runs epochs `first_epoch..first_epoch + cfg.epochs`; the epoch index
/// seeds the shuffle, so resumed training reproduces a single long run.
pub(crate) fn train_from_epoch(
    net: &Network,
    data: &Dataset,
    cfg: &TrainConfig,
    qat: Option<&QatConfig>,
    eval: Option<&Dataset>,
    first_epoch: usize,
    velocity: &mut Momentum,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.input_shape() != net.manifest().input_shape.as_slice() {
        return Err(Error::shape(format!(
            "dataset shape {:?} does not match network input {:?}",
            data.input_shape(),
            net.manifest().input_shape
        )));
    }
    if let Some(q) = qat {
        q.validate()?;
    }
    let mut latent = net.clone();
    if velocity.0.is_empty() {
        velocity.0 = latent.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
    }
    let weights = weight_names(&latent);
    let mut gradients = GradientStats::for_network(&latent);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let sample_len = data.sample_len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut xs = Vec::with_capacity(cfg.batch_size * sample_len);
    let mut ys = Vec::with_capacity(cfg.batch_size);

    for epoch in first_epoch..first_epoch + cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &["shuffle".into(), epoch.into()]));
        gradients = GradientStats::for_network(&latent);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            xs.clear();
            ys.clear();
            for &i in batch {
                xs.extend_from_slice(data.sample(i));
                ys.push(data.labels()[i]);
            }
            let (loss, mut grads, hits) = match qat {
                None => latent.backward_counting(&xs, &ys)?,
                Some(q) => {
                    let shadow = quantized_shadow(&latent, q)?;
                    let (loss, mut grads, hits) = shadow.backward_counting(&xs, &ys)?;
                    for name in &weights {
                        let idx = grads.names.iter().position(|n| n == name).unwrap();
                        grads.values[idx] = q.backward(&grads.values[idx], latent.values(name)?, shadow.values(name)?)?;
                    }
                    (loss, grads, hits)
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            correct += hits;
            gradients.accumulate(&grads);
            for ((p, v), g) in latent.params_mut().iter_mut().zip(velocity.0.iter_mut()).zip(grads.values.iter_mut()) {
                for ((w, vel), gi) in p.values.iter_mut().zip(v.iter_mut()).zip(g.iter_mut()) {
                    *vel = cfg.momentum * *vel + *gi;
                    *w -= cfg.learning_rate * *vel;
                }
            }
        }
        let test_accuracy = match eval {
            Some(d) => Some(match qat {
                Some(q) => evaluate(&deploy(&latent, q)?, d)?,
                None => evaluate(&latent, d)?,
            }),
            None => None,
        };
        epochs.push(EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            test_accuracy,
        });
    }
    if cfg.epochs == 0 {
        gradients = GradientStats::default();
    }
    Ok(TrainOutcome { network: latent, gradients, epochs })
}

/// One pass over `data` without updates, summing |gradient| per weight.
pub fn accumulate_gradients(net: &Network, data: &Dataset, batch_size: usize) -> Result<GradientStats> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let mut stats = GradientStats::for_network(net);
    let n = data.sample_len();
    for (xs, ys) in data.inputs().chunks(batch_size * n).zip(data.labels().chunks(batch_size)) {
        let (_, grads) = net.backward(xs, ys)?;
        stats.accumulate(&grads);
    }
    Ok(stats)
}

fn weight_quantizers(net: &Network, qat: &QatConfig) -> Result<Vec<(String, UniformQuantizer)>> {
    net.manifest()
        .layers
        .iter()
        .filter_map(|l| l.weight_ref.as_ref().map(|w| (l, w)))
        .map(|(l, w)| {
            let clip = qat
                .weight_clips
                .get(&l.name)
                .ok_or_else(|| Error::arg(format!("no weight clip range for layer `{}`", l.name)))?;
            Ok((w.clone(), UniformQuantizer::new(qat.weight_bits, *clip)?))
        })
        .collect()
}

fn act_quant(qat: &QatConfig) -> Option<ActQuant> {
    if qat.act_clips.is_empty() {
        return None;
    }
    Some(ActQuant { bits: qat.act_bits, clips: qat.act_clips.iter().map(|(k, c)| (k.clone(), c.high)).collect() })
}

/// The forward-pass network of QAT: fake-quantized weights and activations.
fn quantized_shadow(latent: &Network, qat: &QatConfig) -> Result<Network> {
    let mut shadow = latent.with_act_quant(act_quant(qat))?;
    shadow.act_delta = if qat.straight_through { 0.0 } else { qat.delta };
    for (name, q) in weight_quantizers(latent, qat)? {
        let p = shadow.param_mut(&name).unwrap();
        for v in p.values.iter_mut() {
            *v = q.quantize(*v);
        }
    }
    Ok(shadow)
}

/// Snaps weights to their quantization grids and records the activation
/// quantizers in the manifest, giving the network used for inference.
pub fn deploy(latent: &Network, qat: &QatConfig) -> Result<Network> {
    let mut net = quantized_shadow(latent, qat)?;
    net.act_delta = 0.0;
    Ok(net)
}

/// Builds a QAT configuration with weight ranges at the 1st/99th percentile
/// of each layer's weights and activation ranges `[0, p99]` of each ReLU
/// output over up to `calibration_samples` samples of `data`.
pub fn calibrate_qat(
    net: &Network,
    data: &Dataset,
    weight_bits: u32,
    act_bits: u32,
    delta: f64,
    calibration_samples: usize,
) -> Result<QatConfig> {
    let mut cfg = QatConfig::new(weight_bits, act_bits, delta)?;
    for layer in net.manifest().layers.iter().filter(|l| l.weight_ref.is_some()) {
        let w = net.values(layer.weight_ref.as_ref().unwrap())?;
        let mut sorted = w.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut lo = stats::percentile_sorted(&sorted, 1.0);
        let mut hi = stats::percentile_sorted(&sorted, 99.0);
        if hi <= lo {
            let pad = lo.abs().max(1e-6);
            lo -= pad;
            hi += pad;
        }
        cfg.weight_clips.insert(layer.name.clone(), ClipRange::new(lo, hi)?);
    }
    let relus: Vec<(usize, String)> = net
        .manifest()
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == LayerKind::ReLU)
        .map(|(i, l)| (i, l.name.clone()))
        .collect();
    let mut acts: Vec<Vec<f64>> = vec![Vec::new(); relus.len()];
    for i in 0..data.len().min(calibration_samples.max(1)) {
        let outs = net.trace(data.sample(i))?;
        for (slot, (idx, _)) in acts.iter_mut().zip(&relus) {
            slot.extend_from_slice(&outs[*idx]);
        }
    }
    for (values, (_, name)) in acts.iter().zip(&relus) {
        let hi = stats::percentile(values, 99.0);
        let hi = if hi.is_finite() && hi > 0.0 { hi } else { 1.0 };
        cfg.act_clips.insert(name.clone(), ClipRange::new(0.0, hi)?);
    }
    Ok(cfg)
}
