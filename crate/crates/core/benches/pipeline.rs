use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ccnn::cnn::{batch_gradient, init_params, HyperParams, LossKind};
use ccnn::estimator::{estimate_image, Pooling};
use ccnn::image::Illuminant;
use ccnn::patch::{histogram_stretch, sample_random_patches, ExclusionMask};
use ccnn::statistics::{minkowski_estimate, Preset};
use ccnn::synth::{generate, SynthConfig};

#[cfg(feature = "parallel")]
type Pool = rayon::ThreadPool;
#[cfg(not(feature = "parallel"))]
struct Pool;

fn within<T: Send>(pool: Option<&Pool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        #[cfg(feature = "parallel")]
        Some(p) => p.install(f),
        _ => f(),
    }
}

fn workloads(c: &mut Criterion, label: &str, pool: Option<&Pool>) {
    let img = generate(&SynthConfig { count: 1, width: 512, height: 384, rects: 64, ..SynthConfig::default() })
        .unwrap()
        .remove(0)
        .image;
    let hyper = HyperParams { kernel_count: 32, fc_units: 16, ..HyperParams::default() };
    let params = init_params(&hyper, 1).unwrap();
    let gt = Illuminant::normalize([0.3, 0.4, 0.3]).unwrap();
    let patches: Vec<_> = sample_random_patches(&img, 32, 64, &ExclusionMask::default(), 2)
        .unwrap()
        .iter()
        .map(histogram_stretch)
        .collect();
    let batch: Vec<_> = patches.iter().map(|p| (p, gt)).collect();

    let mut g = c.benchmark_group("pipeline");
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("estimate_image", label), |b| {
        b.iter(|| within(pool, || estimate_image(&params, black_box(&img), Pooling::Median, 32).unwrap()))
    });
    g.bench_function(BenchmarkId::new("batch_gradient_64", label), |b| {
        b.iter(|| within(pool, || batch_gradient(&params, black_box(&batch), LossKind::Euclidean).unwrap()))
    });
    g.bench_function(BenchmarkId::new("gray_edge_1", label), |b| {
        b.iter(|| within(pool, || minkowski_estimate(black_box(&img), &Preset::GE1.params()).unwrap()))
    });
    g.finish();
}

#[cfg(feature = "parallel")]
fn bench(c: &mut Criterion) {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    workloads(c, "1-thread", Some(&single));
    workloads(c, &format!("{}-threads", rayon::current_num_threads()), None);
}

#[cfg(not(feature = "parallel"))]
fn bench(c: &mut Criterion) {
    workloads(c, "sequential", None);
}

criterion_group!(benches, bench);
criterion_main!(benches);
