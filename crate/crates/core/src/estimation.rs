//! Channel parameter estimation from aligned sent/received symbol pairs.
//!
//! Received symbols are SNU-normalised heterodyne outputs, so each quadrature
//! of `r` has variance `V_B = ηT/2·V_A + 1 + V_el + ξ_B`. Alice's quadrature
//! for symbol `s` is `x = √2·s` (see [`crate::constellation`]), giving
//! `r = √(ηT/2)·x + noise`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Correlation coefficient below which the pair is declared misaligned.
pub const MIN_ALIGNMENT_CORRELATION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedParams {
    /// Alice's modulation variance (nominal, known at Alice).
    pub v_a: f64,
    pub t_hat: f64,
    /// Trusted receiver efficiency (calibrated constant).
    pub eta: f64,
    /// Electrical noise from calibration.
    pub v_el: f64,
    pub v_b_hat: f64,
    /// Bob-referred excess noise; may be slightly negative.
    pub xi_b_hat: f64,
    pub xi_a_hat: f64,
    /// Symbols per polarisation used for the estimate.
    pub n: usize,
    pub block_id: u64,
}

impl EstimatedParams {
    /// Parameters that an ideal estimator would return for a known link.
    pub fn nominal(v_a: f64, t: f64, eta: f64, v_el: f64, xi_b: f64, n: usize) -> Self {
        EstimatedParams {
            v_a,
            t_hat: t,
            eta,
            v_el,
            v_b_hat: eta * t * v_a / 2.0 + 1.0 + v_el + xi_b,
            xi_b_hat: xi_b,
            xi_a_hat: 2.0 * xi_b / (eta * t),
            n,
            block_id: 0,
        }
    }

    /// Total Bob-side noise `1 + V_el + ξ̂_B` per quadrature.
    pub fn total_noise(&self) -> f64 {
        1.0 + self.v_el + self.xi_b_hat
    }

    /// Heterodyne SNR per quadrature.
    pub fn snr(&self) -> f64 {
        self.eta * self.t_hat * self.v_a / 2.0 / self.total_noise()
    }

    /// `ξ_A` for this link at a given Bob-referred excess noise.
    pub fn alice_referred(&self, xi_b: f64) -> f64 {
        2.0 * xi_b / (self.eta * self.t_hat)
    }

    /// Consistency checks on the estimate; returns a list of violated soft invariants.
    pub fn flags(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.t_hat > 0.0 && self.t_hat <= 1.2) {
            out.push(format!("T_hat = {} outside (0, 1.2]", self.t_hat));
        }
        if self.xi_b_hat <= -0.05 {
            out.push(format!("xi_B_hat = {} below -0.05", self.xi_b_hat));
        }
        if self.n < 10_000 {
            out.push(format!("N = {} below 1e4", self.n));
        }
        out
    }
}

/// Sufficient statistics of one sent/received pair of streams.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Moments {
    cross: f64,
    sent: f64,
    received: f64,
    count: usize,
}

impl Moments {
    fn accumulate(&mut self, sent: &[Complex64], received: &[Complex64]) {
        for (s, r) in sent.iter().zip(received) {
            let x = s * std::f64::consts::SQRT_2;
            self.cross += (r * x.conj()).re;
            self.sent += x.norm_sqr();
            self.received += r.norm_sqr();
        }
        self.count += sent.len();
    }
}

/// Estimate `(T, V_B, ξ_B)` from sent symbols and SNU-normalised received
/// symbols at the same (quantum) positions, pooled over both polarisations.
///
/// The excess noise subtracts the signal contribution using Alice's empirical
/// quadrature variance, which removes the sampling noise of her symbols from
/// `ξ̂_B`; `v_a` is recorded as the nominal value.
pub fn estimate_parameters(
    sent: [&[Complex64]; 2],
    received: [&[Complex64]; 2],
    eta: f64,
    v_el: f64,
    v_a: f64,
) -> Result<EstimatedParams> {
    for (s, r) in sent.iter().zip(&received) {
        if s.len() != r.len() {
            return Err(Error::DimensionMismatch(s.len(), r.len()));
        }
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::invalid(format!("η = {eta} must lie in (0, 1]")));
    }
    let mut m = Moments::default();
    for (s, r) in sent.iter().zip(&received) {
        m.accumulate(s, r);
    }
    if m.count == 0 || m.sent == 0.0 {
        return Err(Error::invalid("no symbols to estimate from"));
    }
    let correlation = m.cross / (m.sent * m.received).sqrt();
    if !(correlation >= MIN_ALIGNMENT_CORRELATION) {
        return Err(Error::Alignment(correlation));
    }
    let n = m.count;
    // Per-quadrature averages over 2n real samples.
    let t = m.cross / m.sent;
    let v_a_emp = m.sent / (2 * n) as f64;
    let v_b_hat = m.received / (2 * n) as f64;
    let t_hat = 2.0 * t * t / eta;
    let xi_b_hat = v_b_hat - t * t * v_a_emp - 1.0 - v_el;
    Ok(EstimatedParams {
        v_a,
        t_hat,
        eta,
        v_el,
        v_b_hat,
        xi_b_hat,
        xi_a_hat: excess_noise_alice(xi_b_hat, eta, t_hat)?,
        n: n / 2,
        block_id: 0,
    })
}

/// `ξ_A = 2ξ_B / (ηT)`.
pub fn excess_noise_alice(xi_b: f64, eta: f64, t: f64) -> Result<f64> {
    if !(eta > 0.0) || !(t > 0.0) {
        return Err(Error::invalid(format!("η = {eta} and T = {t} must be positive")));
    }
    Ok(2.0 * xi_b / (eta * t))
}

/// One-sided standard normal quantile `z` with `P(Z > z) = eps`.
pub fn upper_quantile(eps: f64) -> f64 {
    -Normal::standard().inverse_cdf(eps)
}

/// Upper confidence bound `ξ̂ + z(ε_PE)·(total noise)·√(2/N)`.
pub fn worst_case_excess_noise(xi_b_hat: f64, n: f64, eps_pe: f64, total_noise_variance: f64) -> Result<f64> {
    if !(n >= 1e4) {
        return Err(Error::invalid(format!("N = {n} must be ≥ 1e4")));
    }
    if !(eps_pe > 0.0 && eps_pe < 1.0) {
        return Err(Error::invalid(format!("ε_PE = {eps_pe} must lie in (0, 1)")));
    }
    Ok(xi_b_hat + upper_quantile(eps_pe) * total_noise_variance * (2.0 / n).sqrt())
}
