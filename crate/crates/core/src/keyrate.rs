//! Secret key rates of the no-switching (heterodyne) Gaussian-modulated
//! protocol with a trusted detector, finite-size penalty, and distance sweeps.
//!
//! All bits-per-symbol figures are dual-polarisation sums: the two
//! polarisations are independent parallel channels.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::transmittance_from_distance;
use crate::estimation::{worst_case_excess_noise, EstimatedParams};
use crate::{Error, Result};

/// Tolerance below 1 for symplectic eigenvalues before a parameter set is
/// declared unphysical.
pub const SYMPLECTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Asymptotic,
    FiniteSize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorModel {
    /// `η` and `V_el` are characterised and not attributed to Eve.
    #[default]
    Trusted,
    /// Detector loss and electrical noise are handed to Eve.
    Untrusted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityParams {
    pub eps_total: f64,
    /// Reported alongside `eps_total`; does not enter the rate.
    pub eps_prep: f64,
    pub beta: f64,
    /// Fractions of `eps_total` assigned to parameter estimation and
    /// smoothing; correctness takes the rest.
    pub pe_fraction: f64,
    pub smoothing_fraction: f64,
    pub detector: DetectorModel,
}

impl Default for SecurityParams {
    fn default() -> Self {
        SecurityParams {
            eps_total: 1e-8,
            eps_prep: 0.0,
            beta: 0.95,
            pe_fraction: 1.0 / 3.0,
            smoothing_fraction: 1.0 / 3.0,
            detector: DetectorModel::Trusted,
        }
    }
}

impl SecurityParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.eps_total) {
            return Err(Error::invalid(format!("ε = {} must lie in (0, 1)", self.eps_total)));
        }
        if !(self.eps_prep >= 0.0 && self.eps_prep < 1.0) {
            return Err(Error::invalid(format!("ε_prep = {} must lie in [0, 1)", self.eps_prep)));
        }
        if !(self.beta >= 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("β = {} must lie in [0, 1]", self.beta)));
        }
        if !unit(self.pe_fraction) || !unit(self.smoothing_fraction) || self.pe_fraction + self.smoothing_fraction >= 1.0
        {
            return Err(Error::invalid("ε split fractions must be positive and sum below 1"));
        }
        Ok(())
    }

    pub fn eps_pe(&self) -> f64 {
        self.eps_total * self.pe_fraction
    }

    pub fn eps_smoothing(&self) -> f64 {
        self.eps_total * self.smoothing_fraction
    }

    pub fn eps_correctness(&self) -> f64 {
        self.eps_total * (1.0 - self.pe_fraction - self.smoothing_fraction)
    }

    /// Overall security level `ε + ε_prep`.
    pub fn total_security(&self) -> f64 {
        self.eps_total + self.eps_prep
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateResult {
    pub i_ab: f64,
    pub chi_be: f64,
    /// Dual-polarisation finite-size penalty `2·Δ(n)` (zero when asymptotic).
    pub delta_n: f64,
    /// Unclamped `β·I_AB − χ_BE − delta_n`.
    pub raw_secret_fraction: f64,
    /// `max(raw, 0)`.
    pub secret_fraction: f64,
    /// Excess noise (Bob-referred) used in the Holevo bound.
    pub xi_b_used: f64,
    pub regime: Regime,
}

impl KeyRateResult {
    pub fn secret_fraction_per_pol(&self) -> f64 {
        self.secret_fraction / 2.0
    }
}

/// Gaussian entropy kernel `g(x)` in bits.
pub fn g_function(x: f64) -> Result<f64> {
    if !(x >= 1.0 - SYMPLECTIC_TOL) {
        return Err(Error::CovarianceValidity(x));
    }
    if x <= 1.0 {
        return Ok(0.0);
    }
    let (p, m) = ((x + 1.0) / 2.0, (x - 1.0) / 2.0);
    let tail = if m > 0.0 { m * m.log2() } else { 0.0 };
    Ok(p * p.log2() - tail)
}

/// Dual-polarisation heterodyne mutual information `2·log2(1 + SNR)`.
pub fn mutual_information(params: &EstimatedParams) -> f64 {
    mutual_information_at(params, params.xi_b_hat.max(0.0))
}

fn mutual_information_at(params: &EstimatedParams, xi_b: f64) -> f64 {
    let t = params.t_hat.max(0.0);
    let snr = params.eta * t * params.v_a / 2.0 / (1.0 + params.v_el + xi_b);
    2.0 * (1.0 + snr).log2()
}

/// Symplectic eigenvalues `[λ₁, λ₂, λ₃, λ₄]` of the trusted-detector
/// heterodyne entanglement-based model.
pub fn symplectic_eigenvalues(v_a: f64, t: f64, xi_a: f64, eta: f64, v_el: f64) -> Result<[f64; 4]> {
    if !(t > 0.0 && t <= 1.0) || !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::invalid(format!("T = {t} and η = {eta} must lie in (0, 1]")));
    }
    if !(v_a >= 0.0) || !(v_el >= 0.0) || !xi_a.is_finite() {
        return Err(Error::invalid("V_A and V_el must be ≥ 0 and ξ_A finite"));
    }
    let v = v_a + 1.0;
    let chi_line = 1.0 / t - 1.0 + xi_a;
    let chi_het = (2.0 - eta + 2.0 * v_el) / eta;
    let chi_tot = chi_line + chi_het / t;

    let a = v * v * (1.0 - 2.0 * t) + 2.0 * t + t * t * (v + chi_line).powi(2);
    let b = (t * (v * chi_line + 1.0)).powi(2);
    let c = (a * chi_het * chi_het
        + b
        + 1.0
        + 2.0 * chi_het * (v * b.sqrt() + t * (v + chi_line))
        + 2.0 * t * (v * v - 1.0))
        / (t * (v + chi_tot)).powi(2);
    let d = ((v + b.sqrt() * chi_het) / (t * (v + chi_tot))).powi(2);

    let pair = |s: f64, p: f64| -> [f64; 2] {
        let disc = (s * s - 4.0 * p).max(0.0).sqrt();
        [((s + disc) / 2.0).max(0.0).sqrt(), ((s - disc) / 2.0).max(0.0).sqrt()]
    };
    let [l1, l2] = pair(a, b);
    let [l3, l4] = pair(c, d);
    let out = [l1, l2, l3, l4];
    if let Some(&bad) = out.iter().find(|&&l| !(l >= 1.0 - SYMPLECTIC_TOL)) {
        return Err(Error::CovarianceValidity(bad));
    }
    Ok(out)
}

/// Dual-polarisation Holevo bound for channel-input-referred excess noise.
pub fn holevo_chi(v_a: f64, t: f64, xi_a: f64, eta: f64, v_el: f64) -> Result<f64> {
    let [l1, l2, l3, l4] = symplectic_eigenvalues(v_a, t, xi_a, eta, v_el)?;
    Ok(2.0 * (g_function(l1)? + g_function(l2)? - g_function(l3)? - g_function(l4)?))
}

fn holevo_at(params: &EstimatedParams, xi_b: f64, detector: DetectorModel) -> Result<f64> {
    match detector {
        DetectorModel::Trusted => {
            holevo_chi(params.v_a, params.t_hat, params.alice_referred(xi_b), params.eta, params.v_el)
        }
        DetectorModel::Untrusted => {
            let t = params.eta * params.t_hat;
            holevo_chi(params.v_a, t, 2.0 * (xi_b + params.v_el) / t, 1.0, 0.0)
        }
    }
}

/// Worst-case `ξ_B` for the block behind `params`.
pub fn worst_case_xi(params: &EstimatedParams, security: &SecurityParams) -> Result<f64> {
    worst_case_excess_noise(params.xi_b_hat, params.n as f64, security.eps_pe(), params.total_noise())
}

/// Dual-polarisation Holevo bound; negative excess noise is clamped to 0.
pub fn holevo_bound(params: &EstimatedParams, use_worst_case: bool, security: &SecurityParams) -> Result<f64> {
    let xi = if use_worst_case { worst_case_xi(params, security)? } else { params.xi_b_hat };
    holevo_at(params, xi.max(0.0), security.detector)
}

/// Per-polarisation penalty `Δ(n) = 7·√(log2(2/ε̄)/n)`.
pub fn finite_size_penalty(n: f64, security: &SecurityParams) -> Result<f64> {
    if !(n >= 1e4) {
        return Err(Error::invalid(format!("n = {n} must be ≥ 1e4")));
    }
    Ok(7.0 * ((2.0 / security.eps_smoothing()).log2() / n).sqrt())
}

pub fn secret_fraction(params: &EstimatedParams, security: &SecurityParams, regime: Regime) -> Result<KeyRateResult> {
    security.validate()?;
    let i_ab = mutual_information(params);
    let (xi_used, delta_n) = match regime {
        Regime::Asymptotic => (params.xi_b_hat, 0.0),
        Regime::FiniteSize => {
            (worst_case_xi(params, security)?, 2.0 * finite_size_penalty(params.n as f64, security)?)
        }
    };
    let chi_be = holevo_at(params, xi_used.max(0.0), security.detector)?;
    let raw = security.beta * i_ab - chi_be - delta_n;
    Ok(KeyRateResult {
        i_ab,
        chi_be,
        delta_n,
        raw_secret_fraction: raw,
        secret_fraction: raw.max(0.0),
        xi_b_used: xi_used,
        regime,
    })
}

/// Key rate in bit/s; only quantum symbols carry key.
pub fn skr(secret_fraction: f64, symbol_rate: f64, pilot_fraction: f64) -> Result<f64> {
    if !(symbol_rate >= 0.0) || !(0.0..=1.0).contains(&pilot_fraction) {
        return Err(Error::invalid("symbol rate must be ≥ 0 and pilot fraction in [0, 1]"));
    }
    Ok((symbol_rate * (1.0 - pilot_fraction) * secret_fraction).max(0.0))
}

/// Link description for distance sweeps. `xi_b` is held fixed at Bob's side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub v_a: f64,
    pub eta: f64,
    pub v_el: f64,
    pub xi_b: f64,
    pub n: usize,
    pub loss_db_per_km: f64,
    pub symbol_rate: f64,
    pub pilot_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub distance_km: f64,
    pub t: f64,
    pub xi_b: f64,
    pub xi_b_worst: f64,
    pub i_ab: f64,
    pub chi_be: f64,
    pub delta_n: f64,
    pub sf_finite: f64,
    pub sf_asymptotic: f64,
    pub skr_bps: f64,
}

pub fn distance_point(base: &SweepBase, distance_km: f64, security: &SecurityParams) -> Result<SweepRow> {
    let t = transmittance_from_distance(distance_km, base.loss_db_per_km)?;
    let params = EstimatedParams::nominal(base.v_a, t, base.eta, base.v_el, base.xi_b, base.n);
    let finite = secret_fraction(&params, security, Regime::FiniteSize)?;
    let asymptotic = secret_fraction(&params, security, Regime::Asymptotic)?;
    Ok(SweepRow {
        distance_km,
        t,
        xi_b: base.xi_b,
        xi_b_worst: finite.xi_b_used,
        i_ab: finite.i_ab,
        chi_be: finite.chi_be,
        delta_n: finite.delta_n,
        sf_finite: finite.secret_fraction,
        sf_asymptotic: asymptotic.secret_fraction,
        skr_bps: skr(finite.secret_fraction, base.symbol_rate, base.pilot_fraction)?,
    })
}

pub fn distance_sweep(base: &SweepBase, distances: &[f64], security: &SecurityParams) -> Result<Vec<SweepRow>> {
    if distances.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::invalid("distances must be non-decreasing"));
    }
    distances.par_iter().map(|&d| distance_point(base, d, security)).collect()
}

/// Distance at which the finite-size secret fraction reaches zero, by bisection
/// on `[lo, hi]` km. `None` if the sign does not change on the interval.
pub fn zero_crossing_km(base: &SweepBase, security: &SecurityParams, lo: f64, hi: f64) -> Result<Option<f64>> {
    let raw = |d: f64| -> Result<f64> {
        let t = transmittance_from_distance(d, base.loss_db_per_km)?;
        let p = EstimatedParams::nominal(base.v_a, t, base.eta, base.v_el, base.xi_b, base.n);
        Ok(secret_fraction(&p, security, Regime::FiniteSize)?.raw_secret_fraction)
    };
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (raw(a)?, raw(b)?);
    if fa.signum() == fb.signum() {
        return Ok(None);
    }
    for _ in 0..80 {
        let mid = 0.5 * (a + b);
        if raw(mid)?.signum() == fa.signum() {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "distance_km,T,xi_B,xi_B_worst,I_AB,chi_BE,delta_n,SF_finite,SF_asymptotic,SKR_bps")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.10e},{:.6e},{:.6e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.6e}",
            r.distance_km, r.t, r.xi_b, r.xi_b_worst, r.i_ab, r.chi_be, r.delta_n, r.sf_finite, r.sf_asymptotic, r.skr_bps
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn g_function_values() {
        assert_eq!(g_function(1.0).unwrap(), 0.0);
        assert!((g_function(3.0).unwrap() - 2.0).abs() < 1e-12);
        let x = 1e4;
        assert!((g_function(x).unwrap() - (std::f64::consts::E * x / 2.0).log2()).abs() < 1e-7);
        assert!(g_function(0.99).is_err());
        assert_eq!(g_function(1.0 - 1e-12).unwrap(), 0.0);
    }

    #[test]
    fn mutual_information_reference_point() {
        let p = EstimatedParams::nominal(5.0, 0.60256, 0.6, 0.1, 0.012, 1_800_000);
        assert_relative_eq!(p.snr(), 0.812_81, epsilon = 1e-5);
        assert_relative_eq!(mutual_information(&p), 2.0 * 1.812_806f64.log2(), epsilon = 1e-5);
        let zero = EstimatedParams { t_hat: 0.0, ..p.clone() };
        assert_eq!(mutual_information(&zero), 0.0);
        let noisier = EstimatedParams { xi_b_hat: 0.024, ..p.clone() };
        assert!(mutual_information(&noisier) < mutual_information(&p));
    }

    #[test]
    fn holevo_vanishes_for_perfect_link() {
        let chi = holevo_chi(5.0, 1.0, 0.0, 1.0, 0.0).unwrap();
        assert!(chi.abs() < 1e-9, "{chi}");
        assert!(holevo_chi(5.0, 0.5, 0.02, 0.6, 0.1).unwrap() > 0.0);
    }

    #[test]
    fn penalty_values() {
        let s = SecurityParams::default();
        let d = finite_size_penalty(1.8e6, &s).unwrap();
        let oracle = 7.0 * ((6e8f64).log2() / 1.8e6).sqrt();
        assert_relative_eq!(d, oracle, epsilon = 1e-12);
        assert!((d - 0.02817).abs() < 5e-5);
        assert_relative_eq!(finite_size_penalty(4.0 * 1.8e6, &s).unwrap(), d / 2.0, epsilon = 1e-12);
        assert!(finite_size_penalty(1e20, &s).unwrap() < 1e-6);
    }

    #[test]
    fn skr_examples() {
        assert_relative_eq!(skr(0.2, 400e6, 0.5).unwrap(), 40e6, epsilon = 1e-6);
        assert_eq!(skr(0.2, 400e6, 1.0).unwrap(), 0.0);
        assert_eq!(skr(-0.2, 400e6, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn secret_fraction_orderings() {
        let s = SecurityParams::default();
        let p = EstimatedParams::nominal(5.0, 0.60256, 0.6, 0.1, 0.016, 1_800_000);
        let finite = secret_fraction(&p, &s, Regime::FiniteSize).unwrap();
        let asym = secret_fraction(&p, &s, Regime::Asymptotic).unwrap();
        assert!(asym.secret_fraction > finite.secret_fraction);
        assert!(finite.secret_fraction > 0.0);
        assert!(finite.secret_fraction <= s.beta * finite.i_ab);
        let none = secret_fraction(&p, &SecurityParams { beta: 0.0, ..s.clone() }, Regime::FiniteSize).unwrap();
        assert_eq!(none.secret_fraction, 0.0);
        assert!(none.raw_secret_fraction < 0.0);
    }

    #[test]
    fn asymptotic_limit_consistency() {
        let s = SecurityParams::default();
        let p = EstimatedParams::nominal(5.0, 0.5, 0.6, 0.1, 0.01, usize::MAX / 2);
        let finite = secret_fraction(&p, &s, Regime::FiniteSize).unwrap();
        let asym = secret_fraction(&p, &s, Regime::Asymptotic).unwrap();
        assert!((finite.raw_secret_fraction - asym.raw_secret_fraction).abs() < 1e-7);
    }

    #[test]
    fn untrusted_detector_is_pessimistic() {
        let p = EstimatedParams::nominal(5.0, 0.6, 0.6, 0.1, 0.01, 1_800_000);
        let trusted = secret_fraction(&p, &SecurityParams::default(), Regime::Asymptotic).unwrap();
        let untrusted = secret_fraction(
            &p,
            &SecurityParams { detector: DetectorModel::Untrusted, ..Default::default() },
            Regime::Asymptotic,
        )
        .unwrap();
        assert!(untrusted.chi_be > trusted.chi_be);
    }

    #[test]
    fn sweep_shape() {
        let base = SweepBase {
            v_a: 5.0,
            eta: 0.6,
            v_el: 0.1,
            xi_b: 0.016,
            n: 1_800_000,
            loss_db_per_km: 2.2 / 9.5,
            symbol_rate: 400e6,
            pilot_fraction: 0.5,
        };
        let s = SecurityParams::default();
        let distances: Vec<f64> = (0..=40).map(|i| i as f64 * 0.5).collect();
        let rows = distance_sweep(&base, &distances, &s).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].sf_finite <= w[0].sf_finite + 1e-12);
            assert!(w[1].sf_asymptotic <= w[0].sf_asymptotic + 1e-12);
        }
        assert!(rows.iter().all(|r| r.sf_finite <= r.sf_asymptotic));
        let star = distance_point(&base, 9.5, &s).unwrap();
        assert!(star.sf_finite > 0.0 && star.sf_asymptotic > 0.0);
        let finite_zero = zero_crossing_km(&base, &s, 0.0, 60.0).unwrap().unwrap();
        assert!((12.0..=20.0).contains(&finite_zero), "{finite_zero}");
        assert!(distance_sweep(&base, &[2.0, 1.0], &s).is_err());
    }

    #[test]
    fn sweep_csv_header() {
        let mut buf = Vec::new();
        write_sweep_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "distance_km,T,xi_B,xi_B_worst,I_AB,chi_BE,delta_n,SF_finite,SF_asymptotic,SKR_bps\n"
        );
    }
}
