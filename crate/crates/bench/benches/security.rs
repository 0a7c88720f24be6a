use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use cvqkd_core::estimation::{worst_case_excess_noise, EstimatedParams};
use cvqkd_core::keyrate::{holevo_chi, secret_fraction, Regime, SecurityParams};
use cvqkd_core::prep_error::{eps_prep, eps_prep_f64};

fn key_rate(c: &mut Criterion) {
    c.bench_function("holevo_chi", |b| b.iter(|| holevo_chi(black_box(5.0), 0.60256, 0.04, 0.6, 0.1).unwrap()));
    let params = EstimatedParams::nominal(5.0, 0.60256, 0.6, 0.1, 0.012, 1_800_000);
    let security = SecurityParams::default();
    c.bench_function("secret_fraction finite-size", |b| {
        b.iter(|| secret_fraction(black_box(&params), &security, Regime::FiniteSize).unwrap())
    });
    c.bench_function("worst_case_excess_noise", |b| {
        b.iter(|| worst_case_excess_noise(black_box(0.016), 1.8e6, security.eps_pe(), 1.116).unwrap())
    });
}

fn preparation_error(c: &mut Criterion) {
    let mut group = c.benchmark_group("eps_prep");
    group.sample_size(10);
    group.bench_function("f64 K=256 n_max=60", |b| b.iter(|| eps_prep_f64(256, black_box(0.039), 5.0, 60).unwrap()));
    group.bench_function("mpfr K=256 n_max=60", |b| b.iter(|| eps_prep(256, black_box(0.039), 5.0, 60).unwrap()));
    group.finish();
}

criterion_group!(benches, key_rate, preparation_error);
criterion_main!(benches);
