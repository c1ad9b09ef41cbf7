use asl_core::kernels::{conv_depthwise, conv_pointwise, Matrix};
use asl_core::parallel;
use asl_core::shift::{asl_backward, asl_forward_raw};
use asl_core::verify::random_tensor;
use asl_core::zoo::{build, NetworkConfig};
use asl_core::Shape4;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PATHS: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor::<f32>(Shape4::new(8, 64, 32, 32), &mut rng);
    let w = Matrix::from_vec(64, 64, random_tensor::<f32>(Shape4::new(64, 64, 1, 1), &mut rng).into_vec()).unwrap();
    let dw = random_tensor::<f32>(Shape4::new(64, 1, 3, 3), &mut rng);
    let theta: Vec<f32> = (0..128).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();

    let mut group = c.benchmark_group("kernels");
    for (path, on) in PATHS {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::new("conv1x1", path), |b| b.iter(|| conv_pointwise(&x, &w, 1).unwrap()));
        group.bench_function(BenchmarkId::new("dwconv3x3", path), |b| b.iter(|| conv_depthwise(&x, &dw, 1, 1).unwrap()));
        group.bench_function(BenchmarkId::new("asl_forward", path), |b| b.iter(|| asl_forward_raw(&x, &theta, 1).unwrap()));
        let (y, cache) = asl_forward_raw(&x, &theta, 1).unwrap();
        group.bench_function(BenchmarkId::new("asl_backward", path), |b| b.iter(|| asl_backward(&y, &cache).unwrap()));
    }
    group.finish();
    parallel::set_enabled(true);
}

fn training_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor::<f32>(Shape4::new(16, 3, 32, 32), &mut rng);
    let labels: Vec<usize> = (0..16).map(|i| i % 10).collect();
    let mut g = build::<f32>(&NetworkConfig::asnet_cifar(20, 16, 1), 0).unwrap();
    let mut group = c.benchmark_group("asnet20_step");
    group.sample_size(10);
    for (path, on) in PATHS {
        parallel::set_enabled(on);
        group.bench_function(path, |b| {
            b.iter(|| {
                g.forward_loss(&x, &labels).unwrap();
                g.backward().unwrap();
            })
        });
    }
    group.finish();
    parallel::set_enabled(true);
}

criterion_group!(benches, kernels, training_step);
criterion_main!(benches);
