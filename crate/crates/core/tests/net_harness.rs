mod common;

use bqkit::net::{self, evaluate, train, Arch, Dataset, Network, Param, Split, TrainConfig};
use bqkit::store::{LayerDesc, LayerKind, ModelManifest};
use common::*;
use rand::Rng;

fn dense_only(weights: Vec<f64>, bias: Vec<f64>, n_in: usize, n_out: usize, softmax: bool) -> Network {
    let mut layers = vec![LayerDesc::op("flat", LayerKind::Flatten), LayerDesc::dense("fc")];
    if softmax {
        layers.push(LayerDesc::op("sm", LayerKind::Softmax));
    }
    let manifest = ModelManifest { layers, input_shape: vec![n_in], num_classes: n_out, act_quant: None };
    Network::from_params(
        manifest,
        vec![
            Param { name: "fc.weight".into(), shape: vec![n_out, n_in], values: weights },
            Param { name: "fc.bias".into(), shape: vec![n_out], values: bias },
        ],
    )
    .unwrap()
}

#[test]
fn identity_dense_returns_inputs() {
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let net = dense_only(eye, vec![0.0; 3], 3, 3, false);
    let x = [0.5f32, -1.25, 3.0, 1.0, 2.0, -7.5];
    let out = net.forward(&x).unwrap();
    for (row, chunk) in out.iter().zip(x.chunks(3)) {
        for (a, b) in row.iter().zip(chunk) {
            assert_eq!(*a, f64::from(*b));
        }
    }
}

#[test]
fn zero_weights_give_uniform_softmax() {
    let net = dense_only(vec![0.0; 20], vec![0.0; 5], 4, 5, true);
    let out = net.forward(&[1.0, -2.0, 3.0, 4.0]).unwrap();
    for p in &out[0] {
        assert!((p - 0.2).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    for seed in 0..20 {
        let (net, x, _) = random_fd_case(seed, 4);
        for row in net.forward(&x).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn two_layer_net_matches_matmul_oracle() {
    let net = Arch::Mlp { hidden: vec![5] }.build(&[4], 3, 11).unwrap();
    let x = [0.3f32, -0.7, 1.1, 0.05];
    let w1 = &net.param("fc1.weight").unwrap().values;
    let b1 = &net.param("fc1.bias").unwrap().values;
    let w2 = &net.param("fc2.weight").unwrap().values;
    let b2 = &net.param("fc2.bias").unwrap().values;
    // Hidden layer and output computed by explicit index loops.
    let mut h = [0.0f64; 5];
    for j in 0..5 {
        let mut acc = b1[j];
        for i in 0..4 {
            acc += w1[j * 4 + i] * f64::from(x[i]);
        }
        h[j] = if acc > 0.0 { acc } else { 0.0 };
    }
    let out = net.forward(&x).unwrap();
    for k in 0..3 {
        let mut acc = b2[k];
        for j in 0..5 {
            acc += w2[k * 5 + j] * h[j];
        }
        assert!((out[0][k] - acc).abs() < 1e-6);
    }
}

#[test]
fn forward_rejects_wrong_batch_shape() {
    let net = Arch::Mlp { hidden: vec![3] }.build(&[4], 2, 0).unwrap();
    assert!(net.forward(&[1.0; 7]).is_err());
    assert!(net.backward(&[1.0; 8], &[0]).is_err());
    assert!(net.backward(&[1.0; 4], &[5]).is_err());
}

#[test]
fn single_dense_gradient_is_outer_product() {
    let mut r = rng(3);
    let (n_in, n_out) = (4, 3);
    let w: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let net = dense_only(w.clone(), b.clone(), n_in, n_out, false);
    let x = [0.2f32, -0.4, 0.9, 1.5];
    let label = 1;
    let (_, grads) = net.backward(&x, &[label]).unwrap();
    let logits: Vec<f64> =
        (0..n_out).map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * f64::from(x[i])).sum::<f64>()).collect();
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let delta: Vec<f64> =
        logits.iter().enumerate().map(|(o, l)| (l - m).exp() / z - if o == label { 1.0 } else { 0.0 }).collect();
    let gw = grads.get("fc.weight").unwrap();
    for o in 0..n_out {
        for i in 0..n_in {
            assert!((gw[o * n_in + i] - delta[o] * f64::from(x[i])).abs() < 1e-12);
        }
    }
    for (gb, d) in grads.get("fc.bias").unwrap().iter().zip(&delta) {
        assert!((gb - d).abs() < 1e-12);
    }
}

#[test]
fn saturated_correct_predictions_have_tiny_gradients() {
    let mut w = vec![0.0; 4];
    w[0] = 50.0;
    w[3] = 50.0;
    let net = dense_only(w, vec![0.0; 2], 2, 2, false);
    let (loss, grads) = net.backward(&[1.0, 0.0, 0.0, 1.0], &[0, 1]).unwrap();
    assert!(loss < 1e-15);
    assert!(grads.values.iter().flatten().all(|g| g.abs() < 1e-15));
}

#[test]
fn gradients_match_finite_differences_for_each_layer_kind() {
    for kind in 0..5 {
        for seed in 0..4 {
            let (net, x, y) = random_fd_case(100 * kind as u64 + seed, kind);
            let (checked, skipped, failures) = finite_difference_check(&net, &x, &y, 1e-4, 1e-3);
            assert!(failures.is_empty(), "kind {kind} seed {seed}: {failures:?}");
            assert!(skipped * 10 <= checked + skipped, "too many non-smooth points");
        }
    }
}

#[test]
fn zero_epochs_return_input_weights() {
    let (train_set, _) = blobs(2, 4, 64, 16, 0);
    let net = Arch::Mlp { hidden: vec![8] }.build(&[4], 2, 1).unwrap();
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let out = train(&net, &train_set, &cfg, None, None).unwrap();
    assert_eq!(out.network, net);
    assert!(out.epochs.is_empty());
}

/// Plain batch-gradient-descent logistic regression, used only as an oracle.
fn logistic_regression_accuracy(data: &Dataset) -> f64 {
    let d = data.sample_len();
    let mut w = vec![0.0f64; d + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; d + 1];
        for i in 0..data.len() {
            let x = data.sample(i);
            let z = w[d] + (0..d).map(|j| w[j] * f64::from(x[j])).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - data.labels()[i] as f64;
            for j in 0..d {
                g[j] += err * f64::from(x[j]);
            }
            g[d] += err;
        }
        for j in 0..=d {
            w[j] -= 0.1 * g[j] / data.len() as f64;
        }
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let x = data.sample(i);
            let z = w[d] + (0..d).map(|j| w[j] * f64::from(x[j])).sum::<f64>();
            usize::from(z > 0.0) == data.labels()[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn separable_blobs_train_to_high_accuracy() {
    let (train_set, _) = blobs(2, 4, 400, 100, 9);
    assert!(logistic_regression_accuracy(&train_set) >= 0.95);
    let net = Arch::Mlp { hidden: vec![16] }.build(&[4], 2, 2).unwrap();
    let cfg = TrainConfig { epochs: 30, learning_rate: 0.05, batch_size: 32, seed: 4, momentum: 0.9 };
    let out = train(&net, &train_set, &cfg, None, None).unwrap();
    assert_eq!(out.epochs.len(), 30);
    assert!(evaluate(&out.network, &train_set).unwrap() >= 0.95);
    assert_eq!(out.gradients.batch_count, 400usize.div_ceil(32));
    assert!(out.gradients.sums.values().flatten().all(|g| *g >= 0.0));
}

#[test]
fn training_is_bit_reproducible() {
    let (train_set, _) = textures(2, 0.5, 128, 16, 1);
    let net = cnn(2, 3);
    let cfg = TrainConfig { epochs: 2, seed: 5, ..TrainConfig::default() };
    let a = train(&net, &train_set, &cfg, None, None).unwrap();
    let b = train(&net, &train_set, &cfg, None, None).unwrap();
    for (p, q) in a.network.params().iter().zip(b.network.params()) {
        assert!(p.values.iter().zip(&q.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(a.gradients, b.gradients);
}

#[test]
fn constant_prediction_and_random_labels() {
    let (data, _) = blobs(10, 4, 10_000, 10, 2);
    let net = dense_only(vec![0.0; 40], vec![0.0; 10], 4, 10, false);
    // All-zero weights predict class 0 for every sample.
    let zeros = data.with_labels(vec![0; data.len()]).unwrap();
    assert_eq!(evaluate(&net, &zeros).unwrap(), 1.0);

    let trained = Arch::Mlp { hidden: vec![8] }.build(&[4], 10, 7).unwrap();
    let mut r = rng(77);
    let random = data.with_labels((0..data.len()).map(|_| r.random_range(0..10)).collect()).unwrap();
    let acc = evaluate(&trained, &random).unwrap();
    assert!((acc - 0.1).abs() <= 0.02, "accuracy {acc}");
}

#[test]
fn model_level_wrappers_agree_with_network() {
    let (data, _) = textures(2, 0.5, 32, 8, 4);
    let net = cnn(2, 1);
    let model = net.to_model().unwrap();
    let a = net::evaluate_model(&model, &data).unwrap();
    let b = evaluate(&Network::from_model(&model).unwrap(), &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(net::forward(&model, data.sample(0)).unwrap().len(), 1);
    assert!(net::backward(&model, data.sample(0), &[0]).is_ok());
    assert_eq!(data.split(), Split::Train);
}
