use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

use nrlab::nets::{Condition, DenoiserNet, NetArch, RefinerNet};
use nrlab::par::Strategy;
use nrlab::rng::RngStream;
use nrlab::schedule::NoiseSchedule;
use nrlab::training::{gen_pairs, refiner_gradient, RefinerMode, TrainConfig};

fn setup() -> (DenoiserNet, RefinerNet, NoiseSchedule) {
    let arch = NetArch::toy(4, 100);
    let mut rng = RngStream::derive(0, "bench", 0);
    let net = DenoiserNet::init_dense(arch.clone(), &mut rng);
    let mut refiner = RefinerNet::init(arch, &mut rng);
    let p: Vec<f64> = refiner.params().iter().map(|_| 0.01 * rng.normal()).collect();
    refiner.set_params(p).unwrap();
    (net, refiner, NoiseSchedule::linear(100, 1e-4, 0.1).unwrap())
}

fn strategies() -> [(&'static str, Strategy); 2] {
    [("sequential", Strategy::Sequential), ("parallel", Strategy::Parallel)]
}

fn refiner_grad(c: &mut Criterion) {
    let (net, refiner, sched) = setup();
    let n = 64;
    let mut rng = RngStream::derive(1, "bench", 0);
    let x = Array2::from_shape_vec((n, 256), rng.normal_vec(n * 256)).unwrap();
    let target = Array2::from_shape_vec((n, 256), rng.normal_vec(n * 256)).unwrap();
    let conds: Vec<Condition> = (0..n).map(|i| Condition::Class(i % 4)).collect();
    let mut g = c.benchmark_group("refiner_gradient_b64_n10");
    g.sample_size(10);
    for (name, s) in strategies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| refiner_gradient(&refiner, &net, &x, &conds, &target, &sched, 10, RefinerMode::Msd, 32, s).unwrap())
        });
    }
    g.finish();
}

fn pair_generation(c: &mut Criterion) {
    let (net, _, sched) = setup();
    let cfg = TrainConfig { quality_draws: 2, ..TrainConfig::default() };
    let mut g = c.benchmark_group("gen_pairs_128");
    g.sample_size(10);
    for (name, s) in strategies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| gen_pairs(&net, None, &sched, &cfg, 128, 0, s).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, refiner_grad, pair_generation);
criterion_main!(benches);
