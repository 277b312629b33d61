use std::f64::consts::PI;
use std::hint::black_box;

use bidomain_core::{
    build_operator, make_grid, make_spectrum, simulate, ConductivitySpec, DecayRule, IonicModel, SimConfig, State,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn compose(c: &mut Criterion) {
    let mut group = c.benchmark_group("compose_bidomain");
    group.sample_size(10);
    for n in [65usize, 129, 257] {
        let g = make_grid(1, &[PI], n).unwrap();
        let spec = ConductivitySpec::uniform(&g, 2.0, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| build_operator(black_box(&spec), &g).unwrap())
        });
    }
    group.finish();
}

fn steps(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate_100_steps");
    group.sample_size(20);
    let model = IonicModel::FitzHughNagumo { eta: 1.0, a: 0.1, b: 1.0, c: 1.0 };
    for n in [65usize, 129] {
        let g = make_grid(1, &[PI], n).unwrap();
        let op = build_operator(&ConductivitySpec::uniform(&g, 2.0, 2.0), &g).unwrap();
        let noise = make_spectrum(DecayRule::PowerLaw { scale: 1.0, exponent: 2.0 }, n - 1, &op).unwrap();
        let mut cfg = SimConfig::new(0.01, 1.0);
        cfg.epsilon = 0.1;
        cfg.record_every = 10;
        cfg.c3 = Some(cfg.resolve_c3(&model).unwrap());
        let init = State::new(g.sample(|x, _| x.cos()), bidomain_core::Field::zeros(&g)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| simulate(&init, &cfg, &op, &model, &noise, black_box(7)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, compose, steps);
criterion_main!(benches);
