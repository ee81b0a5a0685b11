use std::hint::black_box;

use bqkit::gwk::{pq_reshape, weighted_kmeans, KmeansConfig};
use bqkit::net::{Arch, TextureSpec};
use bqkit::Split;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kmeans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // A 64x32x3x3 conv layer cut into 4-element blocks.
    let shape = [64usize, 32, 3, 3];
    let values: Vec<f64> = (0..shape.iter().product()).map(|_| rng.random_range(-0.2..0.2)).collect();
    let blocks = pq_reshape("w", &shape, &values, 4).unwrap();
    let g: Vec<f64> = (0..blocks.n_blocks).map(|_| rng.random_range(0.1..1.0)).collect();
    let cfg = KmeansConfig { max_iter: 20, tol: 0.0, ..KmeansConfig::default() };
    c.bench_function("weighted_kmeans/4608x4/b16", |b| {
        b.iter(|| weighted_kmeans(black_box(&blocks), &g, 16, &cfg).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let data = TextureSpec { classes: 4, size: 8, noise: 1.0 }.generate(256, 1, Split::Test).unwrap();
    let net = Arch::Cnn.build(data.input_shape(), data.num_classes(), 1).unwrap();
    c.bench_function("cnn/forward/256", |b| b.iter(|| net.forward(black_box(data.inputs())).unwrap()));
    c.bench_function("cnn/backward/32", |b| {
        let batch = data.head(32).unwrap();
        b.iter(|| net.backward(black_box(batch.inputs()), batch.labels()).unwrap())
    });
}

criterion_group!(benches, kmeans, forward);
criterion_main!(benches);
