mod common;

use bqkit::gwk::{
    bits_per_weight, pq_inverse, pq_reshape, reduce_gradients, weighted_kmeans, weighted_objective, KmeansConfig,
    KmeansInit, LayerStorage, PqConfig,
};
use common::*;
use rand::Rng;

#[test]
fn scalar_blocks_round_trip() {
    let values: Vec<f64> = (0..37).map(|i| i as f64 * 0.1 - 1.0).collect();
    let blocks = pq_reshape("w", &[37], &values, 1).unwrap();
    assert_eq!((blocks.n_blocks, blocks.pad), (37, 0));
    assert_eq!(pq_inverse(&blocks), values);

    let padded = pq_reshape("w", &[37], &values, 4).unwrap();
    assert_eq!((padded.n_blocks, padded.pad), (10, 3));
    assert_eq!(pq_inverse(&padded), values);
    assert_eq!(padded.block(9), [values[36], 0.0, 0.0, 0.0]);
}

#[test]
fn gradient_reduction_cases() {
    let blocks = pq_reshape("w", &[12], &[0.0; 12], 3).unwrap();

    let uniform = reduce_gradients(&[0.5; 12], &blocks).unwrap();
    assert!(!uniform.uniform_fallback);
    assert!(uniform.g.iter().all(|&g| (g - 0.25).abs() < 1e-15));

    let mut grads = [0.0; 12];
    grads[4] = -2.0;
    let single = reduce_gradients(&grads, &blocks).unwrap();
    let floor = 1e-12 * (2.0 / 3.0);
    let expected = (2.0 / 3.0) / (2.0 / 3.0 + 3.0 * floor);
    assert!((single.g[1] - expected).abs() < 1e-15);
    assert!((single.g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!(single.g.iter().all(|&g| g > 0.0));

    let zero = reduce_gradients(&[0.0; 12], &blocks).unwrap();
    assert!(zero.uniform_fallback);
    assert_eq!(zero.g, vec![0.25; 4]);

    assert!(reduce_gradients(&[0.0; 11], &blocks).is_err());
}

#[test]
fn padding_does_not_dilute_the_last_block() {
    let blocks = pq_reshape("w", &[5], &[0.0; 5], 4).unwrap();
    let r = reduce_gradients(&[1.0; 5], &blocks).unwrap();
    // Both blocks average |1| over their real entries.
    assert_eq!(r.g, vec![0.5, 0.5]);
}

#[test]
fn one_cluster_per_block_is_exact() {
    let mut r = rng(9);
    let values: Vec<f64> = (0..40).map(|_| r.random_range(-1.0..1.0)).collect();
    let blocks = pq_reshape("w", &[40], &values, 4).unwrap();
    let g = vec![0.1; 10];
    let result = weighted_kmeans(&blocks, &g, 10, &KmeansConfig::default()).unwrap();
    assert_eq!(result.objective(), 0.0);
    let mut labels = result.codebook.labels.clone();
    labels.sort_unstable();
    assert_eq!(labels, (0..10).collect::<Vec<u32>>());
    assert_eq!(result.codebook.reconstruct(), blocks.data);
}

#[test]
fn too_many_clusters_is_an_error() {
    let blocks = pq_reshape("w", &[8], &[0.0; 8], 2).unwrap();
    assert!(weighted_kmeans(&blocks, &[0.25; 4], 5, &KmeansConfig::default()).is_err());
}

/// Two well-separated groups, so one update cannot change the assignment.
/// The weighted run lands on the g-weighted means, the ablation on plain
/// means, and the weighted run has the lower weighted objective.
#[test]
fn weighted_update_beats_plain_means_from_the_same_start() {
    let mut r = rng(11);
    let mut values = Vec::new();
    for centre in [-5.0, 5.0] {
        for _ in 0..50 {
            values.push(centre + r.random_range(-1.0..1.0));
            values.push(centre + r.random_range(-1.0..1.0));
        }
    }
    let blocks = pq_reshape("w", &[values.len()], &values, 2).unwrap();
    let mut g: Vec<f64> = (0..blocks.n_blocks).map(|_| r.random_range(0.0..1.0f64).powi(4)).collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    let init = KmeansInit::Centroids(vec![-4.0, -4.0, 4.0, 4.0]);
    let cfg = |uniform| KmeansConfig { max_iter: 1, init: init.clone(), uniform_weights: uniform, ..KmeansConfig::default() };

    let weighted = weighted_kmeans(&blocks, &g, 2, &cfg(false)).unwrap();
    let plain = weighted_kmeans(&blocks, &g, 2, &cfg(true)).unwrap();
    assert_eq!(weighted.codebook.labels, plain.codebook.labels);

    for c in 0..2u32 {
        let members: Vec<usize> = (0..blocks.n_blocks).filter(|&j| weighted.codebook.labels[j] == c).collect();
        for k in 0..2 {
            let mass: f64 = members.iter().map(|&j| g[j]).sum();
            let wmean = members.iter().map(|&j| g[j] * blocks.block(j)[k]).sum::<f64>() / mass;
            let mean = members.iter().map(|&j| blocks.block(j)[k]).sum::<f64>() / members.len() as f64;
            assert!((weighted.codebook.centroid(c as usize)[k] - wmean).abs() < 1e-12);
            assert!((plain.codebook.centroid(c as usize)[k] - mean).abs() < 1e-12);
        }
    }
    let (ow, op) = (weighted_objective(&blocks, &g, &weighted.codebook), weighted_objective(&blocks, &g, &plain.codebook));
    assert!(ow < op, "{ow} vs {op}");
    assert_eq!(ow, weighted.objective());
}

#[test]
fn kmeans_is_deterministic_per_seed() {
    let mut r = rng(12);
    let values: Vec<f64> = (0..600).map(|_| r.random_range(-1.0..1.0)).collect();
    let blocks = pq_reshape("w", &[600], &values, 3).unwrap();
    let g = vec![1.0 / 200.0; 200];
    let cfg = KmeansConfig { seed: 5, ..KmeansConfig::default() };
    let a = weighted_kmeans(&blocks, &g, 16, &cfg).unwrap();
    let b = weighted_kmeans(&blocks, &g, 16, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bits_per_weight_arithmetic() {
    let pq = LayerStorage::Pq { layer: "a".into(), weight_count: 600, n_blocks: 100, d: 6, n_clusters: 32 };
    let report = bits_per_weight(&[pq.clone()]).unwrap();
    assert!((report.label_only - 5.0 / 6.0).abs() < 1e-15);
    assert!((report.total - (500.0 + 6.0 * 32.0 * 32.0) / 600.0).abs() < 1e-12);

    let native = LayerStorage::Native { layer: "b".into(), weight_count: 400, bits: 32 };
    let mixed = bits_per_weight(&[pq, native.clone()]).unwrap();
    assert_eq!(mixed.layers[1].bpw, 32.0);
    assert!((mixed.total - (500.0 + 6144.0 + 12800.0) / 1000.0).abs() < 1e-12);
    assert!((mixed.label_only - 5.0 / 6.0).abs() < 1e-15);

    assert!(bits_per_weight(&[native]).is_err());
}

#[test]
fn cluster_count_follows_bits() {
    let cfg = PqConfig::with_bits(4, 2, 5).unwrap();
    assert_eq!(cfg.n_clusters, 32);
    assert!(PqConfig::with_bits(4, 2, 0).is_err());
    assert!(PqConfig::with_bits(4, 2, 17).is_err());
    assert!(PqConfig::with_bits(0, 2, 5).unwrap().validate().is_err());
}
