use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cclsc::data::{gen_gaussian_mixture, GaussianSpec, Split};
use cclsc::nn::{backward, forward, Architecture, ModelParams};
use cclsc::seleval::score_dataset;
use cclsc::theory::intra_class_variance;
use cclsc::Matrix;

fn setup() -> (Split, ModelParams) {
    let split = gen_gaussian_mixture(&GaussianSpec { classes: 8, dim: 32, per_class: 625, radius: 5.0, std: 1.5, seed: 0 })
        .unwrap()
        .split;
    let arch = Architecture { input_dim: 32, hidden: vec![64], embedding_dim: 32, num_classes: 8, abstention: false };
    let params = ModelParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (split, params)
}

fn run_with<R>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        return rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f);
    }
    let _ = threads;
    f()
}

fn modes() -> Vec<(&'static str, Option<usize>)> {
    if cfg!(feature = "parallel") {
        vec![("1-thread", Some(1)), ("all-threads", None)]
    } else {
        vec![("sequential", None)]
    }
}

fn batch_passes(c: &mut Criterion) {
    let (split, params) = setup();
    let x = &split.train.features;
    let record = forward(&params, x).unwrap();
    let grad = Matrix::from_vec(x.rows(), 8, vec![1e-3; x.rows() * 8]).unwrap();
    let grad_emb = Matrix::from_vec(x.rows(), 32, vec![1e-3; x.rows() * 32]).unwrap();

    let mut group = c.benchmark_group("batch_passes");
    group.sample_size(20);
    for (mode, threads) in modes() {
        group.bench_function(BenchmarkId::new("forward", mode), |b| {
            b.iter(|| run_with(threads, || forward(&params, x).unwrap()))
        });
        group.bench_function(BenchmarkId::new("backward", mode), |b| {
            b.iter(|| run_with(threads, || backward(&params, &record, &grad, Some(&grad_emb)).unwrap()))
        });
        group.bench_function(BenchmarkId::new("score", mode), |b| {
            b.iter(|| run_with(threads, || score_dataset(&params, &split.test).unwrap()))
        });
        group.bench_function(BenchmarkId::new("var_intra", mode), |b| {
            b.iter(|| run_with(threads, || intra_class_variance(record.embeddings(), &split.train.labels, 8)))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_passes);
criterion_main!(benches);
