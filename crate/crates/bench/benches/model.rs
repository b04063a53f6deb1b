use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use usda::model::DarKind;
use usda::nn::Ctx;
use usda::trainer::{dialogue_gradients, TrainConfig, TrainMode};
use usda::Graph;
use usda_bench::{corpus, model};

fn forward(c: &mut Criterion) {
    let dialogues = corpus(50);
    let mut group = c.benchmark_group("model");
    for (dar, mode) in [
        (DarKind::Crf, TrainMode::Mtl),
        (DarKind::Cluster, TrainMode::Clu),
    ] {
        let m = model(dar, 32, &dialogues);
        let prepared = m.prepare(&dialogues);
        let d = &prepared[0];
        let name = format!("{dar:?}").to_lowercase();
        group.bench_function(BenchmarkId::new("predict", &name), |b| {
            b.iter(|| m.predict(d).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward", &name), |b| {
            b.iter(|| {
                let mut g = Graph::new(&m.params);
                m.forward(&mut g, &mut Ctx::eval(), d)
                    .unwrap()
                    .satisfaction
                    .logits
            })
        });
        let config = TrainConfig {
            mode,
            ..Default::default()
        };
        group.bench_function(BenchmarkId::new("gradients", &name), |b| {
            b.iter(|| dialogue_gradients(&m, &m.params, d, &config, &mut Ctx::train(3)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    name = benches;
    config = Criterion::default().measurement_time(Duration::from_secs(3)).sample_size(20);
    targets = forward
);
criterion_main!(benches);
