use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use groco::batchpipe::{batch_loss_and_grad, BatchLossConfig, ViewBatch};
use groco::diffgrad::Tensor;
use groco::evals::{knn_accuracies, DEFAULT_KNN_TAU};
use groco::par::Execution;
use groco::sortcore::diff_sort;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn batch_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_loss_and_grad");
    for images in [32, 128] {
        let z = random_matrix(images * 2, 64, 1);
        let batch = ViewBatch::new(z, (0..images * 2).map(|i| i / 2).collect()).unwrap();
        let cfg = BatchLossConfig::default();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, images), &batch, |b, batch| {
                b.iter(|| batch_loss_and_grad(black_box(batch), &cfg, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn_accuracies");
    let train = random_matrix(1280, 128, 2);
    let test = random_matrix(320, 128, 3);
    let tl: Vec<u32> = (0..1280).map(|i| i % 8).collect();
    let sl: Vec<u32> = (0..320).map(|i| i % 8).collect();
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                knn_accuracies(
                    &train,
                    &tl,
                    black_box(&test),
                    &sl,
                    &[1, 10, 20],
                    DEFAULT_KNN_TAU,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn sort(c: &mut Criterion) {
    let mut group = c.benchmark_group("diff_sort");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [8, 32, 128] {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &v, |b, v| {
            b.iter(|| diff_sort(black_box(v), 1.0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_loss, knn, sort);
criterion_main!(benches);
