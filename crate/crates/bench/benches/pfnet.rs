use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pfnet::network::fixtures;
use pfnet::{integrate_fluid, simulate, solve_pf, DVector, FluidConfig, ManifoldGeometry, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn allocation(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_pf");
    let net = fixtures::linear2();
    let n = DVector::from_column_slice(&[3.0, 1.0, 7.0]);
    group.bench_function("linear2", |b| b.iter(|| solve_pf(black_box(&n), &net, 1e-9).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let big = fixtures::random_critical(&mut rng, 4, 8);
    group.bench_function("random_4x8", |b| {
        b.iter_batched(
            || DVector::from_fn(big.n_routes(), |_, _| rng.random_range(0.0..20.0_f64).floor()),
            |n| solve_pf(&n, &big, 1e-9).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let nets: Vec<_> = (0..16).map(|_| fixtures::random_critical(&mut rng, 4, 8)).collect();
    let mut i = 0;
    c.bench_function("manifold_build", |b| {
        b.iter(|| {
            i = (i + 1) % nets.len();
            ManifoldGeometry::build(&nets[i]).unwrap()
        })
    });
}

fn dynamics(c: &mut Criterion) {
    let mut group = c.benchmark_group("dynamics");
    group.sample_size(10);
    let net = fixtures::linear2();
    let cfg = FluidConfig::phase_level(&net, 100.0).unwrap();
    let n0 = DVector::from_column_slice(&[9.0, 0.0, 0.0]);
    group.bench_function("fluid_linear2_T100", |b| b.iter(|| integrate_fluid(&n0, &cfg).unwrap()));

    let sim = SimConfig::new(fixtures::single_link(1.0, 0.9, pfnet::PhaseTypeDist::erlang(2, 2.0).unwrap()), 1e5, 3);
    group.bench_function("simulate_single_link_1e5", |b| b.iter(|| simulate(&sim).unwrap().events));
    let ht = SimConfig::heavy_traffic(&net, 10.0, &DVector::from_element(3, 1.0), 1e4, 4).unwrap();
    group.bench_function("simulate_linear2_k10_1e4", |b| b.iter(|| simulate(&ht).unwrap().events));
    group.finish();
}

criterion_group!(benches, allocation, geometry, dynamics);
criterion_main!(benches);
