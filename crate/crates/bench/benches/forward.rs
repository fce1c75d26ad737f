use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use stcgn_bench::desk_fixture;
use stcgn_core::train::{self, Splits};
use stcgn_core::{Graph, ModelConfig};

fn forward_and_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("question");
    for k in [4, 10] {
        let (model, samples) = desk_fixture(8, k);
        let s = &samples[1];
        group.bench_with_input(BenchmarkId::new("forward", k), &k, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                black_box(model.forward(&mut g, &s.tree, &s.scene).unwrap().head.logits);
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", k), &k, |b, _| {
            b.iter(|| black_box(model.gradients(&s.tree, &s.scene, &s.counts).unwrap()))
        });
    }
    group.finish();
}

fn one_epoch(c: &mut Criterion) {
    let (_, samples) = desk_fixture(64, 6);
    let cfg = ModelConfig {
        epochs: 1,
        split: [0.75, 0.25, 0.0],
        ..ModelConfig::desk()
    };
    let splits = Splits::new(&samples, &cfg.split).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("epoch_64_questions", |b| {
        b.iter(|| black_box(train::train_splits(&cfg, &splits).unwrap().best_score))
    });
    group.finish();
}

criterion_group!(benches, forward_and_backward, one_epoch);
criterion_main!(benches);
