use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use normswitch::par::Exec;
use normswitch::shard::ShardConfig;
use normswitch::switchable::{sn_backward, sn_forward, Omega, SnLayer};
use normswitch::tensor::{conv2d_grad_with, conv2d_with, ConvParams, FilterBank, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(Shape4::new(32, 16, 16, 16), &mut rng);
    let w = FilterBank::new([32, 16, 3, 3], (0..32 * 16 * 9).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap();
    let p = ConvParams::new(1, 1, 1);
    let dy = random(conv2d_with(Exec::Sequential, &x, &w, p).unwrap().shape(), &mut rng);
    let mut g = c.benchmark_group("conv2d_32x16x16x16_3x3x32");
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        g.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| conv2d_with(exec, &x, &w, p).unwrap()));
        g.bench_function(BenchmarkId::new("backward", name), |b| b.iter(|| conv2d_grad_with(exec, &x, &w, &dy, p).unwrap()));
    }
    g.finish();
}

fn switchable(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(Shape4::new(32, 32, 8, 8), &mut rng);
    let dy = random(x.shape(), &mut rng);
    let layer = SnLayer::new(32, Omega::full(), false);
    let shard = ShardConfig::new(4, 8).unwrap();
    c.bench_function("sn_forward_backward_32x32x8x8", |b| {
        b.iter(|| {
            let (_, cache) = sn_forward(&x, &layer, shard).unwrap();
            sn_backward(&cache, &dy).unwrap()
        })
    });
}

criterion_group!(benches, conv, switchable);
criterion_main!(benches);
