use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use repgraph_bench::SIDES;
use repgraph_core::nonlocal::affinity_matrix;
use repgraph_core::repgraph::{repgraph_attention, sample_representative, OffsetField};
use repgraph_core::tensor::reshape_nodes;
use repgraph_core::{Matrix, Rng, Tensor4};

const CP: usize = 16;
const S: usize = 9;

fn offsets(rng: &mut Rng, side: usize) -> OffsetField<f32> {
    OffsetField::new(rng.uniform_tensor((1, 2 * S, side, side), -3.0, 3.0)).expect("finite offsets")
}

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample");
    for side in SIDES {
        let mut rng = Rng::new(1);
        let x: Tensor4<f32> = rng.uniform_tensor((1, CP, side, side), -1.0, 1.0);
        let off = offsets(&mut rng, side);
        group.bench_function(BenchmarkId::from_parameter(side * side), |b| {
            b.iter(|| sample_representative(black_box(&x), black_box(&off)).expect("sample"))
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(10);
    for side in SIDES {
        let mut rng = Rng::new(2);
        let x: Tensor4<f32> = rng.uniform_tensor((1, CP, side, side), -1.0, 1.0);
        let set = sample_representative(&x, &offsets(&mut rng, side)).expect("sample");
        let q: Matrix<f32> = reshape_nodes(&x);
        group.bench_function(BenchmarkId::new("sparse", side * side), |b| {
            b.iter(|| repgraph_attention(black_box(&q), &set, &set).expect("attention"))
        });
        group.bench_function(BenchmarkId::new("dense_affinity", side * side), |b| {
            b.iter(|| affinity_matrix(black_box(&q), &q).expect("affinity"))
        });
    }
    group.finish();
}

criterion_group!(benches, sampling, attention);
criterion_main!(benches);
