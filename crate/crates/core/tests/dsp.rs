use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use cvqkd_core::channel::{calibrate, propagate, CalibrationRecord, ChannelParams};
use cvqkd_core::constellation::{build_pcs_qam, sample_symbols, scale_to_variance, SymbolBlock};
use cvqkd_core::estimation::{estimate_parameters, EstimatedParams};
use cvqkd_core::rxdsp::{
    cma_equalize, matched_filter_and_downconvert, run_dsp, synchronize, DspConfig, DspOutput, MatchedFilter,
};
use cvqkd_core::txframe::{
    build_frame, pilot_reference, raised_cosine, shape_and_upconvert, FrameLayout, IQWaveform, PilotReference,
    PulseShape,
};
use cvqkd_core::{Complex64, Error};
use rustfft::FftPlanner;

struct Link {
    block: SymbolBlock,
    reference: PilotReference,
    wave: IQWaveform,
}

fn link(n_quantum: usize, v_a: f64, rolloff: f64, seed: u64) -> Link {
    let spec = scale_to_variance(&build_pcs_qam(1024, 0.02).unwrap(), v_a).unwrap();
    let block = sample_symbols(&spec, n_quantum, seed).unwrap();
    let layout = FrameLayout::for_quantum(n_quantum).unwrap();
    let frame = build_frame(&block, &layout, seed + 1).unwrap();
    let shape = PulseShape { rolloff, ..Default::default() };
    let wave = shape_and_upconvert(&frame, &shape, 400e6, 500e6).unwrap();
    let reference = pilot_reference(&layout, seed + 1, v_a).unwrap();
    Link { block, reference, wave }
}

fn config() -> DspConfig {
    DspConfig { cfo_min_pilots: 1000, ..Default::default() }
}

fn receive(l: &Link, params: &ChannelParams, config: &DspConfig, cal: &CalibrationRecord) -> DspOutput {
    let rx = propagate(&l.wave, params).unwrap();
    run_dsp(&rx, &l.reference, config, cal).unwrap()
}

fn estimate(l: &Link, out: &DspOutput, eta: f64, v_el: f64) -> EstimatedParams {
    let q = [out.frame.quantum_symbols(0), out.frame.quantum_symbols(1)];
    estimate_parameters(
        [&l.block.symbols_x, &l.block.symbols_y],
        [&q[0], &q[1]],
        eta,
        v_el,
        l.block.modulation_variance,
    )
    .unwrap()
}

fn dsp_snr_db(e: &EstimatedParams) -> f64 {
    let noise = e.total_noise();
    10.0 * ((e.v_b_hat - noise) / noise).log10()
}

fn b2b(seed: u64) -> ChannelParams {
    ChannelParams {
        distance_km: 0.0,
        cfo_hz: 5e6,
        pol_angle: 0.3,
        pol_phase: 1.0,
        delay_samples: 37.0,
        receiver_gain: 0.02,
        seed,
        ..Default::default()
    }
}

#[test]
fn noiseless_loopback_recovers_symbols() {
    for rolloff in [1.0, 0.4] {
        let l = link(20_000, 5.0, rolloff, 3);
        let params = ChannelParams::ideal();
        // Leakage cancellation trades a small projection loss for ISI removal; off here.
        let cfg = DspConfig { rolloff, pilot_cancellation_span: 0, ..config() };
        let out = receive(&l, &params, &cfg, &CalibrationRecord::exact(&params));
        assert!(!out.report.pol_swapped);
        for (pol, sent) in [&l.block.symbols_x, &l.block.symbols_y].into_iter().enumerate() {
            let q = out.frame.quantum_symbols(pol);
            let err = q.iter().zip(sent.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / sent.len() as f64;
            assert!((err / 5.0).sqrt() < 1e-3, "γ={rolloff} pol {pol}: {}", (err / 5.0).sqrt());
        }
    }
}

#[test]
fn matched_filter_output_noise_has_raised_cosine_spectrum() {
    let n = 1 << 20;
    let mut r = cvqkd_core::rng::rng(5);
    use rand_distr::{Distribution, StandardNormal};
    let mut white = || -> Vec<Complex64> {
        (0..n)
            .map(|_| {
                let (a, b): (f64, f64) = (StandardNormal.sample(&mut r), StandardNormal.sample(&mut r));
                Complex64::new(a, b)
            })
            .collect()
    };
    let wave = IQWaveform {
        x: white(),
        y: white(),
        sample_rate: 5e9,
        symbol_rate: 400e6,
        center_frequency: 500e6,
        symbol_origin: 0.0,
        layout_digest: String::new(),
    };
    let cfg = DspConfig::default();
    let n_symbols = n / 13;
    let [x, _] = matched_filter_and_downconvert(&wave, &cfg, 0.0, n_symbols).unwrap();
    // Welch average at 2 samples per symbol (800 MS/s).
    let seg = 256;
    let fft = FftPlanner::new().plan_fft_forward(seg);
    let mut psd = vec![0.0; seg];
    let mut count = 0;
    for chunk in x[100..x.len() - 100].chunks_exact(seg) {
        let mut buf: Vec<Complex64> = chunk
            .iter()
            .enumerate()
            .map(|(k, z)| z * (0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / seg as f64).cos()))
            .collect();
        fft.process(&mut buf);
        psd.iter_mut().zip(&buf).for_each(|(p, z)| *p += z.norm_sqr());
        count += 1;
    }
    psd.iter_mut().for_each(|p| *p /= count as f64);
    // γ = 1 raised-cosine spectrum: ½(1 + cos(π f / R)) for |f| ≤ R.
    let expected: Vec<f64> = (0..seg)
        .map(|k| {
            let f = if k <= seg / 2 { k as f64 } else { k as f64 - seg as f64 } / seg as f64 * 800e6;
            0.5 * (1.0 + (std::f64::consts::PI * f / 400e6).cos())
        })
        .collect();
    let scale = psd.iter().sum::<f64>() / expected.iter().sum::<f64>();
    let (mut num, mut den) = (0.0, 0.0);
    for (p, e) in psd.iter().zip(&expected) {
        if *e > 0.1 {
            num += (p / scale - e).powi(2);
            den += e * e;
        }
    }
    assert!((num / den).sqrt() < 0.05, "residual {}", (num / den).sqrt());
    // Unit white-noise gain: per-quadrature variance 1 at the filter output.
    let var = x[100..x.len() - 100].iter().map(|z| z.norm_sqr()).sum::<f64>() / (2.0 * (x.len() - 200) as f64);
    assert!((var - 1.0).abs() < 0.01, "{var}");
    // The autocorrelation at half-symbol lags is the raised cosine.
    let lag1 = x[100..x.len() - 100].windows(2).map(|w| (w[1] * w[0].conj()).re).sum::<f64>()
        / (2.0 * (x.len() - 201) as f64);
    assert!((lag1 - raised_cosine(0.5, 1.0)).abs() < 0.01);
}

#[test]
fn synchronization_recovers_inserted_delays() {
    let l = link(4000, 5.0, 1.0, 7);
    let cfg = config();
    let cal = |p: &ChannelParams| CalibrationRecord::exact(p);
    let run = |delay: f64| -> f64 {
        let params = ChannelParams { delay_samples: delay, distance_km: 0.0, seed: 3, ..Default::default() };
        let rx = propagate(&l.wave, &params).unwrap();
        let scale = cal(&params).snu_scale.sqrt();
        let bb = [
            cvqkd_core::rxdsp::downconvert(&rx.x, rx.center_frequency, rx.sample_rate, scale),
            cvqkd_core::rxdsp::downconvert(&rx.y, rx.center_frequency, rx.sample_rate, scale),
        ];
        let sync = synchronize(&bb, &l.reference, &cfg, rx.sample_rate).unwrap();
        sync.symbol_time - rx.symbol_origin
    };
    let integer = run(1234.0);
    assert_eq!(integer.round(), 1234.0);
    assert!((integer - 1234.0).abs() < 0.1);
    assert!((run(1234.5) - 1234.5).abs() < 0.1);

    // Noise without a preamble.
    let params = ChannelParams { distance_km: 0.0, seed: 4, ..Default::default() };
    let silent = IQWaveform { x: vec![Complex64::new(0.0, 0.0); 200_000], y: vec![Complex64::new(0.0, 0.0); 200_000], ..l.wave.clone() };
    let rx = propagate(&silent, &params).unwrap();
    let bb = [rx.x.clone(), rx.y.clone()];
    let r = synchronize(&bb, &l.reference, &cfg, rx.sample_rate);
    assert!(matches!(r, Err(Error::SyncFailure { .. })), "{r:?}");
}

#[test]
fn equalizer_on_identity_channel_stays_near_identity() {
    let l = link(20_000, 5.0, 1.0, 9);
    let params = ChannelParams::ideal();
    let cfg = config();
    let [x, y] = matched_filter_and_downconvert(&l.wave, &cfg, l.wave.symbol_origin, l.reference.layout.frame_length).unwrap();
    let cma = cma_equalize(&[x, y], &l.reference.pilot_positions, l.reference.layout.frame_length, 1.0, &cfg).unwrap();
    let centre = cfg.cma_taps / 2;
    for i in 0..2 {
        let main = cma.taps[i][i][centre].norm();
        let rest: f64 = (0..2)
            .flat_map(|j| cma.taps[i][j].iter().enumerate().map(move |(t, w)| (j, t, w)))
            .filter(|&(j, t, _)| !(j == i && t == centre))
            .map(|(_, _, w)| w.norm_sqr())
            .sum();
        assert!(rest.sqrt() < 0.05 * main, "pol {i}");
        let moduli: Vec<f64> = l.reference.pilot_positions.iter().map(|&p| cma.outputs[i][p].norm()).collect();
        let mean = moduli.iter().sum::<f64>() / moduli.len() as f64;
        let rms = (moduli.iter().map(|m| (m / mean - 1.0).powi(2)).sum::<f64>() / moduli.len() as f64).sqrt();
        assert!(rms < 0.02, "pol {i}: {rms}");
    }
    assert!(cma.converged);
    let _ = params;
}

fn leakage_db(l: &Link, out: &DspOutput) -> [f64; 2] {
    let sent = [&l.block.symbols_x, &l.block.symbols_y];
    let mut result = [0.0; 2];
    for (i, r) in result.iter_mut().enumerate() {
        let q = out.frame.quantum_symbols(i);
        let corr = |s: &[Complex64]| q.iter().zip(s).map(|(a, b)| a * b.conj()).sum::<Complex64>().norm_sqr();
        *r = 10.0 * (corr(sent[1 - i]) / corr(sent[i])).log10();
    }
    result
}

#[test]
fn equalizer_undoes_a_45_degree_rotation() {
    let l = link(20_000, 5.0, 1.0, 11);
    let params = ChannelParams { pol_angle: FRAC_PI_4, pol_phase: 0.7, ..b2b(12) };
    let cal = calibrate(&params, 200_000, 13).unwrap();
    let out = receive(&l, &params, &config(), &cal);
    for leak in leakage_db(&l, &out) {
        assert!(leak < -20.0, "{leak} dB");
    }
}

#[test]
fn polarisation_swap_is_resolved_by_the_preamble() {
    let l = link(20_000, 5.0, 1.0, 14);
    let params = ChannelParams { pol_angle: FRAC_PI_2, pol_phase: 0.0, ..b2b(15) };
    let cal = calibrate(&params, 200_000, 16).unwrap();
    let out = receive(&l, &params, &config(), &cal);
    for leak in leakage_db(&l, &out) {
        assert!(leak < -20.0, "{leak} dB");
    }
    let e = estimate(&l, &out, params.eta, cal.v_el());
    assert!((e.t_hat - 1.0).abs() < 0.02);
}

#[test]
fn pipeline_is_deterministic() {
    let l = link(8000, 5.0, 1.0, 17);
    let params = b2b(18);
    let cal = calibrate(&params, 100_000, 19).unwrap();
    let a = receive(&l, &params, &config(), &cal);
    let b = receive(&l, &params, &config(), &cal);
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
}

#[test]
fn back_to_back_snr_penalty_is_small() {
    let (eta, v_el) = (0.6, 0.1);
    let mut previous = f64::NEG_INFINITY;
    for (k, target_db) in [0.0, 3.0, 6.0, 10.0, 15.0].into_iter().enumerate() {
        let snr = 10f64.powf(target_db / 10.0);
        let v_a = 2.0 * (1.0 + v_el) * snr / eta;
        let l = link(20_000, v_a, 1.0, 20 + k as u64);
        let params = b2b(30 + k as u64);
        let cal = calibrate(&params, 400_000, 40 + k as u64).unwrap();
        let out = receive(&l, &params, &config(), &cal);
        let e = estimate(&l, &out, eta, cal.v_el());
        let ideal = 10.0 * (eta * v_a / 2.0 / (1.0 + cal.v_el())).log10();
        let measured = dsp_snr_db(&e);
        assert!((measured - ideal).abs() <= 0.5, "{target_db} dB: ideal {ideal:.3}, DSP {measured:.3}");
        assert!(measured > previous);
        previous = measured;
    }
}

#[test]
fn noise_free_link_reaches_the_isi_floor() {
    let l = link(20_000, 5.0, 1.0, 50);
    let params = ChannelParams { linewidth_tx: 0.0, linewidth_lo: 0.0, v_el: 0.0, shot_noise: false, ..b2b(51) };
    let out = receive(&l, &params, &config(), &CalibrationRecord::exact(&params));
    let e = estimate(&l, &out, 1.0, 0.0);
    let snr = dsp_snr_db(&e);
    assert!(snr > 40.0, "{snr} dB");
}

#[test]
fn impaired_link_recovers_injected_excess_noise() {
    let l = link(100_000, 5.0, 1.0, 60);
    let params = ChannelParams {
        xi_b: 0.012,
        cfo_hz: 20e6,
        pol_angle: FRAC_PI_4,
        pol_phase: 0.3,
        delay_samples: 1234.0,
        receiver_gain: 0.05,
        seed: 61,
        ..Default::default()
    };
    let cal = calibrate(&params, 1_000_000, 62).unwrap();
    let out = receive(&l, &params, &config(), &cal);
    assert!(out.report.cma_converged);
    assert!((out.report.cfo_estimate_hz - 20e6).abs() < 1e4);
    let e = estimate(&l, &out, params.eta, cal.v_el());
    let t = params.transmittance().unwrap();
    // Estimator spread at N = 1e5 plus the default phase-tracking penalty.
    let sigma = (1.0 + params.v_el + params.xi_b) * (2.0 / (4.0 * 1e5f64)).sqrt();
    assert!((e.xi_b_hat - 0.012).abs() < 5.0 * sigma + 5e-3, "{}", e.xi_b_hat);
    assert!((e.t_hat - t).abs() < 0.02 * t);
}

#[test]
fn matched_filter_grid_matches_pointwise_evaluation() {
    let mf = MatchedFilter::new(1.0, 12.5, 32);
    let x: Vec<Complex64> = (0..5000).map(|k| Complex64::from_polar(1.0, 0.01 * k as f64)).collect();
    let grid = mf.sample_grid(&x, 17.3, 25, 2, 300);
    for m in [0, 5, 299] {
        assert!((grid[m] - mf.sample(&x, 17.3 + 12.5 * m as f64)).norm() < 1e-12);
    }
}
