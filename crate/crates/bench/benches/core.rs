use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use olt_core::autodiff::Tape;
use olt_core::classifier::{ModelConfig, ModelState};
use olt_core::eval::{auroc, ScoreRecord};
use olt_core::scoring::theorem::verify_temperature_separation;
use olt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn model() -> ModelState {
    ModelState::init(ModelConfig::new(20, 15, 0)).unwrap()
}

fn tensor_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_tensor(&mut rng, &[32, 128]);
    let b = random_tensor(&mut rng, &[128, 64]);
    c.bench_function("matmul 32x128x64", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
}

fn forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model();
    let x = random_tensor(&mut rng, &[32, 20]);
    let labels: Vec<usize> = (0..32).map(|i| i % 15).collect();
    c.bench_function("forward batch 32", |bench| bench.iter(|| m.forward_batch(black_box(&x), None).unwrap()));
    c.bench_function("forward+backward batch 32", |bench| {
        bench.iter_batched(
            Tape::new,
            |mut tape| {
                let params = m.record_params(&mut tape);
                let xv = tape.leaf(x.clone());
                let (logits, _) = m.record_forward(&mut tape, &params, xv).unwrap();
                let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
                tape.backward(loss).unwrap();
                tape
            },
            BatchSize::SmallInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records: Vec<ScoreRecord> = (0..1600)
        .map(|i| {
            let s = rng.random_range(0.0..1.0);
            if i % 3 == 0 {
                ScoreRecord::ood(s, 0)
            } else {
                ScoreRecord::ind(s, 0, 0)
            }
        })
        .collect();
    c.bench_function("auroc n=1600", |bench| bench.iter(|| auroc(black_box(&records)).unwrap()));
}

fn theorem(c: &mut Criterion) {
    c.bench_function("theorem check 1000 pairs x 3 k x 4 T", |bench| {
        bench.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            verify_temperature_separation(1000, &[3, 10, 150], &[1.5, 2.0, 10.0, 100.0], false, &mut rng).unwrap()
        })
    });
}

criterion_group!(benches, tensor_ops, forward_backward, metrics, theorem);
criterion_main!(benches);
