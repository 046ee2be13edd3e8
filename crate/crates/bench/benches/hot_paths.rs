use bnnps_core::autodiff::{Graph, NodeId, Tensor};
use bnnps_core::bnn::{bind, energy_alpha, Batch, BnnArchitecture, EnergyNoise, ModelHyperparams, VariationalPosterior};
use bnnps_core::bnn::{train, NoiseModel};
use bnnps_core::env::{gen_wet_chicken_batch, WetChicken};
use bnnps_core::policy::{unfold, Cost, Policy, RolloutNoise};
use bnnps_core::rng::RngStream;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn energy_and_gradient(c: &mut Criterion) {
    let arch = BnnArchitecture::new(4, vec![20, 20], 2).unwrap();
    let n = 2500;
    let (b, k) = (250, 50);
    let mut s = RngStream::new(1, 0);
    let q = VariationalPosterior::init(&arch, n, 4.0, &mut s);
    let log_noise = Tensor::vector(vec![-1.0, -1.0]);
    let x = s.standard_normal(&[b, 4]);
    let y = s.standard_normal(&[b, 2]);
    let rows: Vec<usize> = (0..b).collect();
    let hyper = ModelHyperparams::new(4);
    let noise = EnergyNoise::draw(&arch, k, b, &mut s);
    c.bench_function("energy_alpha 2x20 B250 K50 + backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let bound = bind(&mut g, &q, &log_noise, true, true);
            let batch = Batch { x: &x, y: &y, rows: &rows };
            let e = energy_alpha(&mut g, &arch, &bound, batch, n, &hyper, &noise).unwrap();
            black_box(g.backward(e).unwrap());
        })
    });
}

fn rollout_and_gradient(c: &mut Criterion) {
    let env = WetChicken::default();
    let data = gen_wet_chicken_batch(&env, 300, &mut RngStream::new(2, 1)).unwrap();
    let arch = BnnArchitecture::new(4, vec![20, 20], 2).unwrap();
    let mut h = ModelHyperparams::new(4);
    h.epochs = 1;
    h.noise = NoiseModel::Fixed(1e-5);
    let model = train(&data, &arch, &h, true, &mut RngStream::new(2, 2)).unwrap().model;
    let mut ps = RngStream::new(2, 3);
    let policy = Policy::for_model(&model, vec![20, 20], 1.0, &mut ps).unwrap();
    let s0 = ps.standard_normal(&[10, 2]).map(|v| 2.5 + v);
    let mut group = c.benchmark_group("unfold B10 + backward");
    for &(horizon, k) in &[(5usize, 20usize), (10, 20)] {
        let noise = RolloutNoise::draw(&model, k, 10, horizon, &RngStream::new(2, 4));
        group.bench_with_input(BenchmarkId::from_parameter(format!("T{horizon} K{k}")), &noise, |bench, noise| {
            bench.iter(|| {
                let mut g = Graph::new();
                let params: Vec<_> = policy.weights.iter().map(|t| g.param(t.clone())).collect();
                let w: Vec<NodeId> = params.iter().map(|p| p.node).collect();
                let r = unfold(&mut g, &model, &policy, &w, &s0, noise, Cost::WetChicken { length: env.length }).unwrap();
                black_box(g.backward(r.objective).unwrap());
            })
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul forward + backward");
    let mut s = RngStream::new(3, 0);
    for &n in &[32usize, 128, 512] {
        let a = s.standard_normal(&[n, n]);
        let b = s.standard_normal(&[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let pa = g.param(a.clone());
                let pb = g.constant(b.clone());
                let m = g.matmul(pa.node, pb).unwrap();
                let total = g.sum_all(m).unwrap();
                black_box(g.backward(total).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, energy_and_gradient, rollout_and_gradient, matmul);
criterion_main!(benches);
