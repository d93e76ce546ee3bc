use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use partgrid::sparseconv::{backbone_forward, conv_forward, BackboneConfig, BackboneWeights, ConvSpec};
use partgrid_bench::{random_sparse, rng};
use rand::Rng;

fn weights(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-0.1f32..0.1)).collect()
}

fn bench_conv(c: &mut Criterion) {
    let input = random_sparse([200, 200, 20], 20_000, 16, 8);
    let subm = ConvSpec::submanifold(3, 16, 16, weights(27 * 16 * 16, 9));
    c.bench_function("conv/subm3_16to16_20k", |b| b.iter(|| conv_forward(black_box(&input), &subm).unwrap()));
    let strided = ConvSpec::strided(3, [2, 2, 2], 16, 32, weights(27 * 16 * 32, 10));
    c.bench_function("conv/stride2_16to32_20k", |b| b.iter(|| conv_forward(black_box(&input), &strided).unwrap()));
}

fn bench_backbone(c: &mut Criterion) {
    let cfg = BackboneConfig {
        in_channels: 3,
        encoder: vec![8, 16, 16, 16],
        decoder: vec![16, 16, 16, 8],
        bev_channels: 8,
        subm_per_level: 1,
    };
    let w = BackboneWeights::seeded(&cfg, 11);
    let input = random_sparse([352, 400, 16], 8_000, 3, 12);
    let mut g = c.benchmark_group("backbone");
    g.sample_size(10);
    g.bench_function("small_8k", |b| b.iter(|| backbone_forward(black_box(&input), &cfg, &w).unwrap()));
    g.finish();
}

criterion_group!(benches, bench_conv, bench_backbone);
criterion_main!(benches);
