use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kt_core::dataset::{build_sequences, make_batches, synthesize_students};
use kt_core::model::Mode;
use kt_core::node2vec::{generate_walks, skill2vec};
use kt_core::tape::Tape;
use kt_core::{KtModel, ModelConfig, SynthConfig, Tensor, WalkConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 128, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let a = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn walks(c: &mut Criterion) {
    let data = synthesize_students(&SynthConfig::new(10, 110, 10, 0).unwrap()).unwrap();
    let config = WalkConfig { num_walks: 2000, walk_length: 128, ..WalkConfig::default() };
    c.bench_function("node2vec_walks_2000x128", |b| b.iter(|| black_box(generate_walks(&data.graph, &config).unwrap())));
    let small = WalkConfig { num_walks: 500, walk_length: 40, ..WalkConfig::default() };
    c.bench_function("skill2vec_500x40", |b| b.iter(|| black_box(skill2vec(&data.graph, &small).unwrap())));
}

fn forward(c: &mut Criterion) {
    let n = 110;
    let data = synthesize_students(&SynthConfig { interactions_per_student: 100, ..SynthConfig::new(64, n, 10, 0).unwrap() })
        .unwrap();
    let seqs = build_sequences(&data.records, 100);
    let batch = make_batches(&seqs, n, 100, 64, 2 * n + 1).unwrap().remove(0);
    let model = KtModel::<f32>::init(&ModelConfig::new(n), 0).unwrap();
    let mut group = c.benchmark_group("model_batch64_len100");
    group.sample_size(10);
    group.bench_function("predict", |b| b.iter(|| black_box(model.predict(&batch).unwrap())));
    group.bench_function("loss_backward", |b| {
        b.iter(|| {
            let (pass, losses) = model.loss(&batch, None, 0.0, Mode::Train, 0).unwrap();
            black_box(pass.tape.backward(losses.total).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, walks, forward);
criterion_main!(benches);
