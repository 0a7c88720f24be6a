use cvqkd_core::estimation::EstimatedParams;
use cvqkd_core::keyrate::{g_function, holevo_chi, secret_fraction, symplectic_eigenvalues, Regime, SecurityParams};
use nalgebra::{DMatrix, Matrix2};
use proptest::prelude::*;

fn block(modes: &[&[Matrix2<f64>]]) -> DMatrix<f64> {
    let n = modes.len();
    DMatrix::from_fn(2 * n, 2 * n, |r, c| modes[r / 2][c / 2][(r % 2, c % 2)])
}

fn symplectic_spectrum(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows() / 2;
    let omega = DMatrix::from_fn(2 * n, 2 * n, |r, c| match (r / 2 == c / 2, r % 2, c % 2) {
        (true, 0, 1) => 1.0,
        (true, 1, 0) => -1.0,
        _ => 0.0,
    });
    // Eigenvalues of ΩM are ±iν.
    let mut nu: Vec<f64> = (&omega * m).complex_eigenvalues().iter().map(|z| z.im.abs()).collect();
    nu.sort_by(|a, b| b.partial_cmp(a).unwrap());
    nu.into_iter().step_by(2).collect()
}

/// Per-polarisation Holevo bound from explicit covariance matrices: EPR source,
/// lossy noisy channel, detector loss/noise as a beam splitter fed by an EPR
/// pair, and heterodyne conditioning.
fn holevo_oracle(v_a: f64, t: f64, xi_a: f64, eta: f64, v_el: f64) -> f64 {
    let v = v_a + 1.0;
    let i = Matrix2::identity();
    let z = Matrix2::new(1.0, 0.0, 0.0, -1.0);
    let zero = Matrix2::zeros();
    let vb = t * (v + 1.0 / t - 1.0 + xi_a);
    let cab = (t * (v * v - 1.0)).sqrt();
    let w = if eta < 1.0 { 1.0 + 2.0 * v_el / (1.0 - eta) } else { 1.0 };
    let cfg = (w * w - 1.0).sqrt();
    // Modes A, B1, F0, G.
    let full = block(&[
        &[i * v, z * cab, zero, zero],
        &[z * cab, i * vb, zero, zero],
        &[zero, zero, i * w, z * cfg],
        &[zero, zero, z * cfg, i * w],
    ]);
    let ab = full.view((0, 0), (4, 4)).into_owned();
    // Beam splitter on (B1, F0): B2 = √η B1 + √(1−η) F0.
    let (s, c) = (eta.sqrt(), (1.0 - eta).sqrt());
    let bs = block(&[
        &[i, zero, zero, zero],
        &[zero, i * s, i * c, zero],
        &[zero, -i * c, i * s, zero],
        &[zero, zero, zero, i],
    ]);
    let mixed = &bs * full * bs.transpose();
    // Reorder to (A, F, G | B2) and condition on heterodyne of B2.
    let order = [0, 1, 4, 5, 6, 7, 2, 3];
    let p = DMatrix::from_fn(8, 8, |r, c| mixed[(order[r], order[c])]);
    let g_rest = p.view((0, 0), (6, 6)).into_owned();
    let sigma = p.view((0, 6), (6, 2)).into_owned();
    let g_b = p.view((6, 6), (2, 2)).into_owned() + DMatrix::identity(2, 2);
    let cond = g_rest - &sigma * g_b.try_inverse().unwrap() * sigma.transpose();
    let s_ab: f64 = symplectic_spectrum(&ab).into_iter().map(|x| g_function(x).unwrap()).sum();
    let s_cond: f64 = symplectic_spectrum(&cond).into_iter().map(|x| g_function(x.max(1.0)).unwrap()).sum();
    s_ab - s_cond
}

#[test]
fn holevo_matches_covariance_oracle_at_the_reference_point() {
    let (eta, t, v_a, v_el, xi_b) = (0.6, 0.60256, 5.0, 0.1, 0.012);
    let xi_a = 2.0 * xi_b / (eta * t);
    let closed = holevo_chi(v_a, t, xi_a, eta, v_el).unwrap();
    let oracle = 2.0 * holevo_oracle(v_a, t, xi_a, eta, v_el);
    assert!((closed - oracle).abs() < 1e-9, "closed form {closed}, oracle {oracle}");
}

#[test]
fn g_function_anchors() {
    assert_eq!(g_function(1.0).unwrap(), 0.0);
    assert!((g_function(3.0).unwrap() - 2.0).abs() < 1e-12);
}

fn physical() -> impl Strategy<Value = (f64, f64, f64, f64, f64)> {
    (1.0f64..=20.0, 1e-3f64..=1.0, 0.0f64..=0.5, 1e-2f64..=1.0, 0.0f64..=0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn symplectic_eigenvalues_are_physical((v_a, t, xi_a, eta, v_el) in physical()) {
        let l = symplectic_eigenvalues(v_a, t, xi_a, eta, v_el).unwrap();
        prop_assert!(l.iter().all(|&x| x >= 1.0 - 1e-9), "{:?}", l);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn closed_form_agrees_with_oracle((v_a, t, xi_a, eta, v_el) in physical()) {
        prop_assume!(eta < 0.999);
        let closed = holevo_chi(v_a, t, xi_a, eta, v_el).unwrap();
        let oracle = 2.0 * holevo_oracle(v_a, t, xi_a, eta, v_el);
        prop_assert!((closed - oracle).abs() < 1e-7 * (1.0 + oracle.abs()), "{} vs {}", closed, oracle);
    }

    #[test]
    fn secret_fraction_is_monotone(xi in 0.0f64..0.03, beta in 0.5f64..0.99) {
        let p = |xi: f64| EstimatedParams::nominal(5.0, 0.60256, 0.6, 0.1, xi, 1_800_000);
        let sec = |beta: f64| SecurityParams { beta, ..SecurityParams::default() };
        let raw = |xi: f64, beta: f64| secret_fraction(&p(xi), &sec(beta), Regime::FiniteSize).unwrap().raw_secret_fraction;
        prop_assert!(raw(xi + 1e-4, beta) < raw(xi, beta));
        prop_assert!(raw(xi, beta + 1e-3) > raw(xi, beta));
    }
}
