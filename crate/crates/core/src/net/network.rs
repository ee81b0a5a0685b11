use std::collections::HashMap;

use rayon::prelude::*;

use crate::qat::{ewgs_scalar, ClipRange, UniformQuantizer};
use crate::store::{ConvMeta, LayerKind, Model, ModelManifest, TensorRecord};
use crate::{Error, Result};

/// Samples handled sequentially by one worker when reducing gradients. Fixed
/// so the summation order never depends on the thread count.
const GRAD_CHUNK: usize = 8;

/// A trainable tensor held in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Dense { w: usize, b: Option<usize>, n_in: usize, n_out: usize },
    Conv { w: usize, b: Option<usize>, meta: ConvMeta, in_hw: (usize, usize), out_hw: (usize, usize) },
    Relu { quant: Option<UniformQuantizer> },
    MaxPool { c: usize, h: usize, w: usize },
    Flatten,
    Softmax,
}

/// Per-layer forward state kept for the backward pass.
enum Cache {
    Input(Vec<f64>),
    Relu { pre: Vec<f64>, act: Vec<f64> },
    Pool(Vec<usize>),
    None,
}

/// Gradients of every parameter, aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }

    fn zeros_like(net: &Network) -> Self {
        Gradients {
            names: net.params.iter().map(|p| p.name.clone()).collect(),
            values: net.params.iter().map(|p| vec![0.0; p.values.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Reference inference and training engine built from a [`Model`].
#[derive(Debug, Clone)]
pub struct Network {
    manifest: ModelManifest,
    ops: Vec<Op>,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    input_len: usize,
    /// Scaling factor applied to activation-quantizer gradients.
    pub(crate) act_delta: f64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.manifest == other.manifest && self.params == other.params
    }
}

impl Network {
    /// Materializes a model; U8 tensors are dequantized.
    pub fn from_model(model: &Model) -> Result<Self> {
        let params = model
            .tensors
            .iter()
            .map(|t| Param { name: t.name.clone(), shape: t.shape().to_vec(), values: t.values_f64() })
            .collect();
        Self::from_params(model.manifest.clone(), params)
    }

    pub fn from_params(manifest: ModelManifest, params: Vec<Param>) -> Result<Self> {
        let records = params
            .iter()
            .map(|p| TensorRecord::f32(p.name.clone(), p.shape.clone(), vec![0.0; p.values.len()]))
            .collect::<Result<Vec<_>>>()?;
        let shapes = manifest.validate(&records)?;
        let index: HashMap<String, usize> =
            params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let mut ops = Vec::with_capacity(manifest.layers.len());
        let mut in_shape = manifest.input_shape.clone();
        for (layer, out_shape) in manifest.layers.iter().zip(&shapes) {
            let pidx = |r: &Option<String>| r.as_ref().map(|n| index[n.as_str()]);
            let op = match layer.kind {
                LayerKind::Dense => Op::Dense {
                    w: pidx(&layer.weight_ref).unwrap(),
                    b: pidx(&layer.bias_ref),
                    n_in: in_shape[0],
                    n_out: out_shape[0],
                },
                LayerKind::Conv2D => Op::Conv {
                    w: pidx(&layer.weight_ref).unwrap(),
                    b: pidx(&layer.bias_ref),
                    meta: layer.conv_meta.unwrap(),
                    in_hw: (in_shape[1], in_shape[2]),
                    out_hw: (out_shape[1], out_shape[2]),
                },
                LayerKind::ReLU => {
                    let quant = match &manifest.act_quant {
                        Some(aq) => match aq.clips.get(&layer.name) {
                            Some(&hi) => Some(UniformQuantizer::new(aq.bits, ClipRange::new(0.0, hi)?)?),
                            None => None,
                        },
                        None => None,
                    };
                    Op::Relu { quant }
                }
                LayerKind::MaxPool2x2 => Op::MaxPool { c: in_shape[0], h: in_shape[1], w: in_shape[2] },
                LayerKind::Flatten => Op::Flatten,
                LayerKind::Softmax => Op::Softmax,
            };
            ops.push(op);
            in_shape = out_shape.clone();
        }
        let input_len = manifest.input_shape.iter().product();
        Ok(Network { manifest, ops, params, index, input_len, act_delta: 0.0 })
    }

    /// Converts back to a model with F32 tensors.
    pub fn to_model(&self) -> Result<Model> {
        let tensors = self
            .params
            .iter()
            .map(|p| TensorRecord::f32(p.name.clone(), p.shape.clone(), p.values.iter().map(|&v| v as f32).collect()))
            .collect::<Result<Vec<_>>>()?;
        Model::new(self.manifest.clone(), tensors)
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Values of parameter `name`, or an error naming it.
    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.param(name).map(|p| p.values.as_slice()).ok_or_else(|| Error::Unknown(name.to_string()))
    }

    pub fn set_values(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let p = self.param_mut(name).ok_or_else(|| Error::Unknown(name.to_string()))?;
        if p.values.len() != values.len() {
            return Err(Error::shape(format!("`{name}` has {} values, got {}", p.values.len(), values.len())));
        }
        p.values = values;
        Ok(())
    }

    /// Replaces the activation quantization settings and rebuilds the plan.
    pub fn with_act_quant(&self, act_quant: Option<crate::store::ActQuant>) -> Result<Network> {
        let mut manifest = self.manifest.clone();
        manifest.act_quant = act_quant;
        let mut net = Network::from_params(manifest, self.params.clone())?;
        net.act_delta = self.act_delta;
        Ok(net)
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    fn ends_with_softmax(&self) -> bool {
        matches!(self.ops.last(), Some(Op::Softmax))
    }

    fn check_input(&self, inputs: &[f32]) -> Result<usize> {
        if inputs.is_empty() || inputs.len() % self.input_len != 0 {
            return Err(Error::shape(format!(
                "batch of {} values is not a multiple of input size {} ({:?})",
                inputs.len(),
                self.input_len,
                self.manifest.input_shape
            )));
        }
        Ok(inputs.len() / self.input_len)
    }

    /// Applies one non-softmax layer.
    fn step(&self, op: &Op, cur: Vec<f64>) -> (Vec<f64>, Cache) {
        match op {
            Op::Dense { w, b, n_in, n_out } => {
                let wv = &self.params[*w].values;
                let mut out = match b {
                    Some(b) => self.params[*b].values.clone(),
                    None => vec![0.0; *n_out],
                };
                for (o, acc) in out.iter_mut().enumerate() {
                    let row = &wv[o * n_in..(o + 1) * n_in];
                    *acc += row.iter().zip(&cur).map(|(a, b)| a * b).sum::<f64>();
                }
                (out, Cache::Input(cur))
            }
            Op::Conv { w, b, meta, in_hw, out_hw } => {
                let bias = b.map(|b| self.params[b].values.as_slice());
                let out = conv_forward(&cur, &self.params[*w].values, bias, meta, *in_hw, *out_hw);
                (out, Cache::Input(cur))
            }
            Op::Relu { quant } => {
                let act: Vec<f64> = cur.iter().map(|&z| z.max(0.0)).collect();
                let out = match quant {
                    Some(q) => act.iter().map(|&a| q.quantize(a)).collect(),
                    None => act.clone(),
                };
                (out, Cache::Relu { pre: cur, act })
            }
            Op::MaxPool { c, h, w } => {
                let (out, arg) = maxpool_forward(&cur, *c, *h, *w);
                (out, Cache::Pool(arg))
            }
            Op::Flatten | Op::Softmax => (cur, Cache::None),
        }
    }

    /// Logits of one sample (the input to a trailing Softmax, if any),
    /// optionally keeping per-layer caches.
    fn run(&self, x: &[f32], mut caches: Option<&mut Vec<Cache>>) -> Vec<f64> {
        let mut cur: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        for op in &self.ops {
            if matches!(op, Op::Softmax) {
                break;
            }
            let (next, cache) = self.step(op, cur);
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            cur = next;
        }
        cur
    }

    /// Class scores for a batch of flattened inputs. Rows are probabilities
    /// when the network ends in Softmax, logits otherwise.
    pub fn forward(&self, inputs: &[f32]) -> Result<Vec<Vec<f64>>> {
        self.check_input(inputs)?;
        let softmax_out = self.ends_with_softmax();
        Ok(inputs
            .par_chunks(self.input_len)
            .map(|x| {
                let logits = self.run(x, None);
                if softmax_out {
                    softmax(&logits)
                } else {
                    logits
                }
            })
            .collect())
    }

    /// Output of every layer for one sample, in manifest order.
    pub fn trace(&self, x: &[f32]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_len {
            return Err(Error::shape(format!("expected one sample of {} values", self.input_len)));
        }
        let mut cur: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
        let mut outputs = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            cur = match op {
                Op::Softmax => softmax(&cur),
                _ => self.step(op, cur).0,
            };
            outputs.push(cur.clone());
        }
        Ok(outputs)
    }

    /// Predicted class of one sample; ties go to the lowest class index.
    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.run(x, None))
    }

    /// Predicted classes for a batch.
    pub fn predict_batch(&self, inputs: &[f32]) -> Result<Vec<usize>> {
        self.check_input(inputs)?;
        Ok(inputs.par_chunks(self.input_len).map(|x| self.predict(x)).collect())
    }

    /// Mean cross-entropy loss and parameter gradients for a batch.
    pub fn backward(&self, inputs: &[f32], labels: &[usize]) -> Result<(f64, Gradients)> {
        let (loss, grads, _) = self.backward_counting(inputs, labels)?;
        Ok((loss, grads))
    }

    /// Like [`Network::backward`], also returning the number of correct predictions.
    pub(crate) fn backward_counting(&self, inputs: &[f32], labels: &[usize]) -> Result<(f64, Gradients, usize)> {
        let n = self.check_input(inputs)?;
        if labels.len() != n {
            return Err(Error::shape(format!("{n} samples but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::arg(format!("label {bad} out of range")));
        }
        let scale = 1.0 / n as f64;
        let partials: Vec<(f64, Gradients, usize)> = inputs
            .chunks(self.input_len * GRAD_CHUNK)
            .zip(labels.chunks(GRAD_CHUNK))
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(xs, ys)| {
                let mut grads = Gradients::zeros_like(self);
                let mut loss = 0.0;
                let mut correct = 0;
                for (x, &y) in xs.chunks(self.input_len).zip(ys) {
                    let (l, hit) = self.sample_backward(x, y, scale, &mut grads);
                    loss += l;
                    correct += usize::from(hit);
                }
                (loss, grads, correct)
            })
            .collect();
        let mut total = Gradients::zeros_like(self);
        let mut loss = 0.0;
        let mut correct = 0;
        for (l, g, c) in &partials {
            loss += l;
            total.add(g);
            correct += c;
        }
        Ok((loss * scale, total, correct))
    }

    /// Accumulates `scale * dLoss/dparam` for one sample into `grads`.
    fn sample_backward(&self, x: &[f32], label: usize, scale: f64, grads: &mut Gradients) -> (f64, bool) {
        let mut caches = Vec::with_capacity(self.ops.len());
        let logits = self.run(x, Some(&mut caches));
        let probs = softmax(&logits);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let hit = argmax(&logits) == label;
        let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        g[label] -= scale;

        for (op, cache) in self.ops.iter().zip(caches).rev() {
            g = match (op, cache) {
                (Op::Dense { w, b, n_in, n_out }, Cache::Input(input)) => {
                    let wv = &self.params[*w].values;
                    let gw = &mut grads.values[*w];
                    let mut gin = vec![0.0; *n_in];
                    for o in 0..*n_out {
                        let go = g[o];
                        if go == 0.0 {
                            continue;
                        }
                        let row = o * n_in;
                        for i in 0..*n_in {
                            gw[row + i] += go * input[i];
                            gin[i] += go * wv[row + i];
                        }
                    }
                    if let Some(b) = b {
                        for (gb, go) in grads.values[*b].iter_mut().zip(&g) {
                            *gb += go;
                        }
                    }
                    gin
                }
                (Op::Conv { w, b, meta, in_hw, out_hw }, Cache::Input(input)) => {
                    let (gin, gw_local) = conv_backward(&g, &input, &self.params[*w].values, meta, *in_hw, *out_hw);
                    for (a, d) in grads.values[*w].iter_mut().zip(&gw_local) {
                        *a += d;
                    }
                    if let Some(b) = b {
                        let plane = out_hw.0 * out_hw.1;
                        for (co, gb) in grads.values[*b].iter_mut().enumerate() {
                            *gb += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    }
                    gin
                }
                (Op::Relu { quant }, Cache::Relu { pre, act }) => g
                    .iter()
                    .zip(pre.iter().zip(&act))
                    .map(|(&go, (&z, &a))| {
                        if z <= 0.0 {
                            return 0.0;
                        }
                        match quant {
                            Some(q) => ewgs_scalar(go, a, q.quantize(a), self.act_delta),
                            None => go,
                        }
                    })
                    .collect(),
                (Op::MaxPool { c, h, w }, Cache::Pool(arg)) => {
                    let mut gin = vec![0.0; c * h * w];
                    for (go, &src) in g.iter().zip(&arg) {
                        gin[src] += go;
                    }
                    gin
                }
                (Op::Flatten, _) => g,
                (Op::Softmax, _) => g,
                _ => unreachable!("cache does not match layer"),
            };
        }
        (loss, hit)
    }
}

fn conv_forward(
    input: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    m: &ConvMeta,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let k = m.k;
    let mut out = vec![0.0; m.c_out * oh * ow];
    for co in 0..m.c_out {
        let b = bias.map_or(0.0, |b| b[co]);
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b);
        for ci in 0..m.c_in {
            let src = &input[ci * ih * iw..(ci + 1) * ih * iw];
            let kern = &w[(co * m.c_in + ci) * k * k..(co * m.c_in + ci + 1) * k * k];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let y = (oy * m.stride + ky) as isize - m.padding as isize;
                        if y < 0 || y >= ih as isize {
                            continue;
                        }
                        let row = &src[y as usize * iw..(y as usize + 1) * iw];
                        for kx in 0..k {
                            let x = (ox * m.stride + kx) as isize - m.padding as isize;
                            if x < 0 || x >= iw as isize {
                                continue;
                            }
                            acc += kern[ky * k + kx] * row[x as usize];
                        }
                    }
                    plane[oy * ow + ox] += acc;
                }
            }
        }
    }
    out
}

/// Returns (input gradient, weight gradient).
fn conv_backward(
    gout: &[f64],
    input: &[f64],
    w: &[f64],
    m: &ConvMeta,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
) -> (Vec<f64>, Vec<f64>) {
    let k = m.k;
    let mut gin = vec![0.0; m.c_in * ih * iw];
    let mut gw = vec![0.0; w.len()];
    for co in 0..m.c_out {
        let gplane = &gout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..m.c_in {
            let base_in = ci * ih * iw;
            let base_w = (co * m.c_in + ci) * k * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = gplane[oy * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let y = (oy * m.stride + ky) as isize - m.padding as isize;
                        if y < 0 || y >= ih as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let x = (ox * m.stride + kx) as isize - m.padding as isize;
                            if x < 0 || x >= iw as isize {
                                continue;
                            }
                            let src = base_in + y as usize * iw + x as usize;
                            gw[base_w + ky * k + kx] += go * input[src];
                            gin[src] += go * w[base_w + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
    (gin, gw)
}

fn maxpool_forward(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if best == usize::MAX || input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
