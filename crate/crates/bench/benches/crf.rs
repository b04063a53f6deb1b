use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use usda::dar_crf::{log_partition, nll_with_gradients, viterbi_decode};
use usda_bench::crf_inputs;

fn crf(c: &mut Criterion) {
    let mut group = c.benchmark_group("crf");
    for (t, k) in [(8, 8), (16, 20), (32, 20)] {
        let (scores, trans) = crf_inputs(t, k, 1);
        let labels: Vec<usize> = (0..t).map(|i| i % k).collect();
        let id = format!("T{t}/K{k}");
        group.bench_function(BenchmarkId::new("log_partition", &id), |b| {
            b.iter(|| log_partition(black_box(&scores), black_box(&trans)))
        });
        group.bench_function(BenchmarkId::new("nll_with_gradients", &id), |b| {
            b.iter(|| nll_with_gradients(black_box(&scores), black_box(&trans), &labels).unwrap())
        });
        group.bench_function(BenchmarkId::new("viterbi", &id), |b| {
            b.iter(|| viterbi_decode(black_box(&scores), black_box(&trans)))
        });
    }
    group.finish();
}

criterion_group!(benches, crf);
criterion_main!(benches);
