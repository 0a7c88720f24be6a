use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use cvqkd_bench::{constellation, received};
use cvqkd_core::constellation::sample_symbols;
use cvqkd_core::prelude::*;
use cvqkd_core::rxdsp::{run_dsp, MatchedFilter};
use cvqkd_core::txframe::{build_frame, shape_and_upconvert};

fn transmitter(c: &mut Criterion) {
    let spec = constellation();
    c.bench_function("sample_symbols 1e5", |b| b.iter(|| sample_symbols(black_box(&spec), 100_000, 7).unwrap()));

    let symbols = sample_symbols(&spec, 10_000, 7).unwrap();
    let layout = FrameLayout::for_quantum(10_000).unwrap();
    let frame = build_frame(&symbols, &layout, 8).unwrap();
    c.bench_function("shape_and_upconvert 1e4", |b| {
        b.iter(|| shape_and_upconvert(black_box(&frame), &PulseShape::default(), 400e6, 500e6).unwrap())
    });
}

fn receiver(c: &mut Criterion) {
    let rx = received(20_000, 11);
    let mf = MatchedFilter::new(1.0, 12.5, 32);
    c.bench_function("matched_filter 2 sps, 1e4 symbols", |b| {
        b.iter(|| mf.sample_grid(black_box(&rx.wave.x), 1000.0, 25, 4, 20_000))
    });

    let mut group = c.benchmark_group("dsp");
    group.sample_size(10);
    group.bench_function("run_dsp 2e4 symbols", |b| {
        b.iter(|| run_dsp(black_box(&rx.wave), &rx.reference, &rx.config, &rx.calibration).unwrap())
    });
    group.finish();
}

criterion_group!(benches, transmitter, receiver);
criterion_main!(benches);
