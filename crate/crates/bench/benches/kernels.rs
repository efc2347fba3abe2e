use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use noisegcl::losses::{infonce_loss, LossConfig};
use noisegcl::training::{train, TrainConfig};
use noisegcl::{generate_sbm, Graph, SbmParams, Tensor};

fn sbm(n_per_block: usize, feat_dim: usize) -> Graph {
    generate_sbm(&SbmParams {
        n_per_block,
        num_blocks: 2,
        p_in: 0.1,
        p_out: 0.01,
        feat_dim,
        feat_shift: 1.0,
        seed: 0,
    })
    .expect("sbm")
    .0
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::standard_normal(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn bench_spmm(c: &mut Criterion) {
    let mut group = c.benchmark_group("spmm");
    for n in [100, 500, 1000] {
        let g = sbm(n, 16);
        let adj = g.normalize();
        let x = random(g.num_nodes(), 64, 1);
        group.bench_with_input(BenchmarkId::from_parameter(2 * n), &n, |b, _| {
            b.iter(|| adj.matrix().mul_dense(black_box(&x)))
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256, 512] {
        let a = random(n, n, 2);
        let b = random(n, n, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).expect("shapes"))
        });
    }
    group.finish();
}

fn bench_infonce(c: &mut Criterion) {
    let mut group = c.benchmark_group("infonce");
    let cfg = LossConfig::default();
    for n in [200, 1000] {
        let z1 = random(n, 32, 4);
        let z2 = random(n, 32, 5);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| infonce_loss(black_box(&z1), black_box(&z2), &cfg).expect("loss"))
        });
    }
    group.finish();
}

fn bench_epoch(c: &mut Criterion) {
    let g = sbm(100, 16);
    let cfg = TrainConfig {
        epochs: 1,
        hidden: 64,
        embed: 32,
        proj: 32,
        edge_hidden: 32,
        attr_hidden: 32,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(20);
    group.bench_function("sbm_200_learnable", |b| {
        b.iter(|| train(black_box(&g), &cfg).expect("train"))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_spmm,
    bench_matmul,
    bench_infonce,
    bench_epoch
);
criterion_main!(benches);
