#![allow(dead_code)]

use bqkit::net::{Arch, BlobSpec, Dataset, GradientStats, Network, Param, Split, TextureSpec};
use bqkit::store::{ConvMeta, LayerDesc, LayerKind, ModelManifest};
use bqkit::{Model, TensorRecord, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference check of every parameter gradient of `net` on a batch.
/// Points where the loss is locally non-smooth (a ReLU or max-pool switch
/// inside the step) are detected by comparing step sizes h and h/2 and
/// skipped. Returns (checked, skipped, failures).
pub fn finite_difference_check(
    net: &Network,
    inputs: &[f32],
    labels: &[usize],
    h: f64,
    rtol: f64,
) -> (usize, usize, Vec<String>) {
    let (_, grads) = net.backward(inputs, labels).unwrap();
    let loss_at = |n: &Network| -> f64 {
        let (l, _) = n.backward(inputs, labels).unwrap();
        l
    };
    let mut checked = 0;
    let mut skipped = 0;
    let mut failures = Vec::new();
    for p in net.params() {
        let g = grads.get(&p.name).unwrap();
        for i in 0..p.values.len() {
            let fd = |step: f64| {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.param_mut(&p.name).unwrap().values[i] += step;
                minus.param_mut(&p.name).unwrap().values[i] -= step;
                (loss_at(&plus) - loss_at(&minus)) / (2.0 * step)
            };
            let d1 = fd(h);
            let d2 = fd(h / 2.0);
            let scale = d1.abs().max(d2.abs()).max(1e-6);
            if (d1 - d2).abs() > rtol * scale {
                skipped += 1;
                continue;
            }
            checked += 1;
            let tol = rtol * g[i].abs().max(d1.abs()) + 1e-8;
            if (g[i] - d1).abs() > tol {
                failures.push(format!("{}[{i}]: analytic {} vs numeric {}", p.name, g[i], d1));
            }
        }
    }
    (checked, skipped, failures)
}

fn random_param(rng: &mut ChaCha8Rng, name: String, shape: Vec<usize>) -> Param {
    let n = shape.iter().product();
    Param { name, shape, values: (0..n).map(|_| rng.random_range(-0.8..0.8)).collect() }
}

/// A random small network exercising `kind` (0: dense, 1: conv+relu,
/// 2: conv+maxpool, 3: strided conv, 4: softmax output), with a random batch.
pub fn random_fd_case(seed: u64, kind: usize) -> (Network, Vec<f32>, Vec<usize>) {
    let mut r = rng(seed);
    let classes = r.random_range(2..5);
    let batch = r.random_range(1..4);
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let input_shape;
    let mut flat;
    if kind == 0 || kind == 4 {
        let d = r.random_range(1..7);
        input_shape = vec![d];
        let hidden = r.random_range(1..6);
        layers.push(LayerDesc::dense("a"));
        params.push(random_param(&mut r, "a.weight".into(), vec![hidden, d]));
        params.push(random_param(&mut r, "a.bias".into(), vec![hidden]));
        layers.push(LayerDesc::op("ra", LayerKind::ReLU));
        flat = hidden;
    } else {
        let c_in = r.random_range(1..3);
        let size = r.random_range(4..7);
        input_shape = vec![c_in, size, size];
        let k = [1, 2, 3][r.random_range(0..3)];
        let stride = if kind == 3 { 2 } else { 1 };
        let padding = r.random_range(0..=k / 2);
        let c_out = r.random_range(1..4);
        let meta = ConvMeta { k, c_in, c_out, stride, padding };
        layers.push(LayerDesc::conv("c", meta));
        params.push(random_param(&mut r, "c.weight".into(), vec![c_out, c_in, k, k]));
        params.push(random_param(&mut r, "c.bias".into(), vec![c_out]));
        let out = (size + 2 * padding - k) / stride + 1;
        let (h, w) = if kind == 2 {
            layers.push(LayerDesc::op("p", LayerKind::MaxPool2x2));
            (out / 2, out / 2)
        } else {
            layers.push(LayerDesc::op("r", LayerKind::ReLU));
            (out, out)
        };
        layers.push(LayerDesc::op("f", LayerKind::Flatten));
        flat = c_out * h * w;
    }
    layers.push(LayerDesc::dense("out"));
    params.push(random_param(&mut r, "out.weight".into(), vec![classes, flat]));
    params.push(random_param(&mut r, "out.bias".into(), vec![classes]));
    if kind == 4 {
        layers.push(LayerDesc::op("sm", LayerKind::Softmax));
    }
    flat = input_shape.iter().product();
    let manifest = ModelManifest { layers, input_shape, num_classes: classes, act_quant: None };
    let net = Network::from_params(manifest, params).unwrap();
    let inputs = (0..batch * flat).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let labels = (0..batch).map(|_| r.random_range(0..classes)).collect();
    (net, inputs, labels)
}

pub fn textures(classes: usize, noise: f64, n_train: usize, n_test: usize, seed: u64) -> (Dataset, Dataset) {
    let spec = TextureSpec { classes, size: 8, noise };
    (
        spec.generate(n_train, seed, Split::Train).unwrap(),
        spec.generate(n_test, seed, Split::Test).unwrap(),
    )
}

pub fn blobs(classes: usize, dim: usize, n_train: usize, n_test: usize, seed: u64) -> (Dataset, Dataset) {
    let spec = BlobSpec { classes, dim, separation: 3.0, spread: 1.0 };
    (
        spec.generate(n_train, seed, Split::Train).unwrap(),
        spec.generate(n_test, seed, Split::Test).unwrap(),
    )
}

pub fn cnn(classes: usize, seed: u64) -> Network {
    Arch::Cnn.build(&[1, 8, 8], classes, seed).unwrap()
}

/// A small CNN trained briefly on 4-class textures, with its test split.
pub fn trained_cnn(seed: u64) -> (Model, Dataset, GradientStats) {
    let (train_set, test) = textures(4, 1.0, 800, 400, seed);
    let cfg = TrainConfig { epochs: 4, learning_rate: 0.02, batch_size: 32, seed, momentum: 0.9 };
    let out = bqkit::net::train(&cnn(4, seed), &train_set, &cfg, None, None).unwrap();
    (out.network.to_model().unwrap(), test, out.gradients)
}

/// Three identity layers followed by a random linear teacher that defines
/// the labels. The identity layers bin losslessly; the teacher cannot be
/// squeezed into a few bins.
pub fn adversarial_fixture() -> (Model, Dataset) {
    let dim = 10;
    let mut r = rng(77);
    let mut layers = Vec::new();
    let mut tensors = Vec::new();
    let eye: Vec<f32> = (0..dim * dim).map(|i| if i / dim == i % dim { 1.0 } else { 0.0 }).collect();
    for i in 1..=3 {
        layers.push(LayerDesc::dense(format!("fc{i}")));
        layers.push(LayerDesc::op(format!("relu{i}"), LayerKind::ReLU));
        tensors.push(TensorRecord::f32(format!("fc{i}.weight"), vec![dim, dim], eye.clone()).unwrap());
        tensors.push(TensorRecord::f32(format!("fc{i}.bias"), vec![dim], vec![0.0; dim]).unwrap());
    }
    let teacher: Vec<f32> = (0..dim * dim).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r) as f32).collect();
    layers.push(LayerDesc::dense("fc4"));
    tensors.push(TensorRecord::f32("fc4.weight", vec![dim, dim], teacher.clone()).unwrap());
    tensors.push(TensorRecord::f32("fc4.bias", vec![dim], vec![0.0; dim]).unwrap());
    let manifest = ModelManifest { layers, input_shape: vec![dim], num_classes: dim, act_quant: None };
    let model = Model::new(manifest, tensors).unwrap();

    let n = 1000;
    let inputs: Vec<f32> = (0..n * dim).map(|_| r.random_range(0.0..1.0)).collect();
    let labels = (0..n)
        .map(|s| {
            let x = &inputs[s * dim..(s + 1) * dim];
            let score = |c: usize| -> f64 { (0..dim).map(|j| teacher[c * dim + j] as f64 * x[j] as f64).sum() };
            (0..dim).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap()
        })
        .collect();
    (model, Dataset::new(inputs, vec![dim], labels, dim, Split::Test).unwrap())
}
