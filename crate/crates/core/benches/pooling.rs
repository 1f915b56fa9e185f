use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use promptpool::{
    alignment_logits, parallel, pool_backward, pool_forward, project_visual, softmax_scores,
    AlignmentConfig, PoolMode, PoolingSpec, ProjectionMatrix, Tensor, TextFeature,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn inputs(d: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = random(&[32, 24, 24, d], &mut rng);
    let logits = random(&[32, 24, 24], &mut rng);
    (v, softmax_scores(&logits).unwrap().into_tensor())
}

// Runs `f` on the rayon pool or the sequential fallback.
fn both<R>(c: &mut Criterion, group: &str, tokens: u64, f: impl Fn() -> R) {
    let mut g = c.benchmark_group(group);
    g.throughput(Throughput::Elements(tokens));
    g.sample_size(20);
    g.bench_function(BenchmarkId::from_parameter("rayon"), |b| {
        b.iter(|| black_box(f()))
    });
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| parallel::sequential(|| black_box(f())))
    });
    g.finish();
}

fn forward(c: &mut Criterion) {
    let (v, s) = inputs(1024);
    let tokens = 32 * 24 * 24;
    for mode in [PoolMode::WeightedAverage, PoolMode::Max] {
        let spec = PoolingSpec::video().with_mode(mode);
        both(c, &format!("pool_forward/{mode}"), tokens, || {
            pool_forward(&v, Some(&s), &spec).unwrap()
        });
    }
}

fn backward(c: &mut Criterion) {
    let (v, s) = inputs(256);
    let spec = PoolingSpec::video();
    let grad = pool_forward(&v, Some(&s), &spec).unwrap();
    both(c, "pool_backward/weighted-average", 32 * 24 * 24, || {
        pool_backward(&v, Some(&s), &spec, &grad).unwrap()
    });
}

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random(&[32, 24, 24, 256], &mut rng);
    let m = ProjectionMatrix::new(random(&[256, 128], &mut rng)).unwrap();
    let text = TextFeature::new(random(&[128], &mut rng).into_data()).unwrap();
    let cfg = AlignmentConfig::default();
    both(c, "scores", 32 * 24 * 24, || {
        let p = project_visual(&v, &m).unwrap();
        softmax_scores(&alignment_logits(&p, &text, &cfg).unwrap()).unwrap()
    });
}

criterion_group!(benches, forward, backward, scoring);
criterion_main!(benches);
