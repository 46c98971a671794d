//! Forward latency of the full-size Lorenz models on a 900-row window and of
//! one STLSQ fit on a Lotka–Volterra sub-domain.

use criterion::{criterion_group, criterion_main, Criterion};
use sendi_bench::random_window;
use sendi_core::dynamics::{simulate_lotka_volterra, uniform_grid, Control, LotkaVolterraParams, OdeOptions};
use sendi_core::models::{ModelConfig, SetModel};
use sendi_core::signal::central_difference;
use sendi_core::sindy::{stlsq, FeatureLibrary, StlsqConfig};

fn forward(c: &mut Criterion) {
    let x = random_window(900, 4, 1);
    let mut g = c.benchmark_group("forward_900_rows");
    g.sample_size(20);
    let deep_set = SetModel::new(ModelConfig::lorenz_deep_set(0)).unwrap();
    g.bench_function("deep_set", |b| b.iter(|| deep_set.predict(&x).unwrap()));
    let transformer = SetModel::new(ModelConfig::lorenz_set_transformer(0)).unwrap();
    g.bench_function("set_transformer", |b| b.iter(|| transformer.predict(&x).unwrap()));
    g.finish();
}

fn sparse_regression(c: &mut Criterion) {
    let p = LotkaVolterraParams::new(0.5, 0.025, 0.005, 0.5, Control::Constant(1.0));
    let tr = simulate_lotka_volterra(&p, 27.5, 10.0, &uniform_grid(0.0, 0.1, 301), &OdeOptions::default()).unwrap();
    let lib = FeatureLibrary::polynomial(&["x", "y"], &["c"], 3);
    let theta = lib.evaluate(&tr.states, tr.controls.as_ref()).unwrap();
    let dx = central_difference(&tr).unwrap();
    let cfg = StlsqConfig::default();
    c.bench_function("stlsq_301x20", |b| b.iter(|| stlsq(&theta, &dx, &cfg).unwrap()));
}

criterion_group!(benches, forward, sparse_regression);
criterion_main!(benches);
