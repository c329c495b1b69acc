use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hyperprompt_core::conditioning::prompts_for;
use hyperprompt_core::data::{default_tasks, generate_task};
use hyperprompt_core::train::{train_step, Optimizer, OptimizerKind, TaskSet, TuneMode};
use hyperprompt_core::{Batch, Binder, Graph, Model, ModelConfig, Stack, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch(n: usize) -> Batch {
    let data: Vec<_> = default_tasks()
        .iter()
        .map(|s| generate_task(s).unwrap())
        .collect();
    let tasks = TaskSet::from_data(&data);
    Batch::from_examples((0..n).map(|i| &tasks.train[i % tasks.len()][i]))
}

fn model(variant: Variant) -> Model {
    Model::new(
        ModelConfig {
            variant,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [32, 64, 128] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.throughput(Throughput::Elements((2 * n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn prompt_generation(c: &mut Criterion) {
    let m = model(Variant::Global);
    let cfg = m.config().clone();
    c.bench_function("prompt_generation/all_layers", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let mut binder = Binder::frozen(m.params());
            for stack in Stack::BOTH {
                for layer in 0..cfg.layers(stack) {
                    black_box(prompts_for(&mut g, &mut binder, &cfg, stack, 0, layer).unwrap());
                }
            }
        })
    });
}

fn forward(c: &mut Criterion) {
    let b = batch(32);
    let mut group = c.benchmark_group("forward_batch32");
    for variant in [
        Variant::None,
        Variant::Global,
        Variant::Sep,
        Variant::Adapter,
    ] {
        let m = model(variant);
        group.bench_function(variant.to_string(), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let mut binder = Binder::frozen(m.params());
                black_box(m.forward_batch(&mut g, &mut binder, &b).unwrap().logits);
            })
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let b = batch(32);
    let mut group = c.benchmark_group("train_step_batch32");
    group.sample_size(20);
    for variant in [Variant::None, Variant::Global] {
        let mut m = model(variant);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-4);
        let mut step = 0;
        group.bench_function(variant.to_string(), |bench| {
            bench.iter(|| {
                step += 1;
                black_box(train_step(&mut m, &mut opt, &b, TuneMode::All, step).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, prompt_generation, forward, training);
criterion_main!(benches);
