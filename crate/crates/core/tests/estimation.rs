use cvqkd_core::channel::{propagate_symbols, ChannelParams};
use cvqkd_core::constellation::{build_pcs_qam, sample_symbols, scale_to_variance, ConstellationSpec};
use cvqkd_core::estimation::{estimate_parameters, worst_case_excess_noise, EstimatedParams};
use cvqkd_core::rng;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn spec() -> ConstellationSpec {
    scale_to_variance(&build_pcs_qam(1024, 0.0198).unwrap(), 5.0).unwrap()
}

fn block(spec: &ConstellationSpec, xi_b: f64, n: usize, seed: u64) -> EstimatedParams {
    let symbols = sample_symbols(spec, n, seed).unwrap();
    let params = ChannelParams { xi_b, seed: rng::split(seed, 99), ..ChannelParams::default() };
    let [x, y] = propagate_symbols(&symbols, &params).unwrap();
    estimate_parameters([&symbols.symbols_x, &symbols.symbols_y], [&x, &y], params.eta, params.v_el, 5.0).unwrap()
}

fn mean_sem(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn excess_noise_estimate_is_consistent() {
    let s = spec();
    let xi: Vec<f64> = (0..1000).map(|b| block(&s, 0.012, 10_000, rng::split(7, b)).xi_b_hat).collect();
    let (m, sem) = mean_sem(&xi);
    assert!((m - 0.012).abs() < 2.0 * sem, "mean {m}, SEM {sem}");
}

#[test]
fn injected_excess_noise_is_recovered_linearly() {
    let s = spec();
    let targets = [0.005, 0.01, 0.02];
    let mut estimates = Vec::new();
    for (k, &xi) in targets.iter().enumerate() {
        let runs: Vec<f64> = (0..20).map(|b| block(&s, xi, 100_000, rng::split(11 + k as u64, b)).xi_b_hat).collect();
        let (m, sem) = mean_sem(&runs);
        assert!((m - xi).abs() < 3.0 * sem, "ξ = {xi}: mean {m}, SEM {sem}");
        estimates.push(m);
    }
    let slope = (estimates[2] - estimates[0]) / (targets[2] - targets[0]);
    assert!((slope - 1.0).abs() < 0.1, "slope {slope}");
}

fn maximum_range(mean: f64, sd: f64, seed: u64) -> (f64, f64) {
    let mut r = rng::rng(seed);
    let mut maxima: Vec<f64> = (0..2000)
        .map(|_| {
            (0..100)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    mean + sd * z
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    maxima.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (maxima[100], maxima[1899])
}

#[test]
fn block_maximum_statistics() {
    let s = spec();
    let xi: Vec<f64> = (0..200).map(|b| block(&s, 0.012, 100_000, rng::split(13, b)).xi_b_hat).collect();
    let (m, sem) = mean_sem(&xi);
    let sd = sem * (xi.len() as f64).sqrt();
    // Gaussian prediction for the spread of a variance estimate over 4N real samples.
    let predicted = 1.112 * (2.0 / 4e5f64).sqrt();
    assert!((sd / predicted - 1.0).abs() < 0.2, "sd {sd}, predicted {predicted}");
    // 90% range of the maximum over 100 blocks at N = 1e5 and at N = 1.8e6;
    // the observed maximum of 0.016 lies between the two.
    let desk = maximum_range(m, sd, 17);
    let full = maximum_range(0.012, sd * (1e5f64 / 1.8e6).sqrt(), 18);
    assert!(full.1 < 0.016 && 0.016 < desk.1, "N = 1.8e6: {full:?}, N = 1e5: {desk:?}");
}

proptest! {
    #[test]
    fn worst_case_dominates_the_estimate(xi in -0.01f64..0.1, n in 1e4f64..1e8, eps in 1e-12f64..0.1, noise in 1.0f64..2.0) {
        prop_assert!(worst_case_excess_noise(xi, n, eps, noise).unwrap() >= xi);
    }
}
