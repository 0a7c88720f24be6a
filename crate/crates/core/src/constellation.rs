//! Probabilistically shaped square QAM.
//!
//! Points live on the odd-integer grid `p, q ∈ {±1, ±3, …, ±(√K − 1)}` and are
//! weighted by the Maxwell-Boltzmann law `exp(−ν(p² + q²))`. The `scale`
//! field maps grid units to transmitted symbol amplitudes.
//!
//! Amplitude convention (shot-noise units, vacuum quadrature variance 1): a
//! transmitted symbol `s = scale·(p + iq)` is the coherent state `|s/√2⟩`.
//! Its quadrature displacement is `2·Re(s/√2) = √2·Re(s)`, so the modulation
//! variance per quadrature is `V_A = 2·scale²·E[p²]` and the mean photon
//! number is `V_A / 2`.

use std::io::Write;

use num_complex::Complex64;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstellationSpec {
    pub cardinality: usize,
    pub nu: f64,
    /// Unit-spaced odd-integer grid points, row-major in `q` then `p`.
    pub points: Vec<Complex64>,
    pub probs: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolBlock {
    pub symbols_x: Vec<Complex64>,
    pub symbols_y: Vec<Complex64>,
    pub seed: u64,
    /// Nominal modulation variance `V_A` of the constellation that produced the block.
    pub modulation_variance: f64,
}

impl SymbolBlock {
    pub fn len(&self) -> usize {
        self.symbols_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols_x.is_empty()
    }
}

/// Side length `√K` of a square QAM, or `None` when `K` is not an even power of two ≥ 4.
pub fn grid_side(cardinality: usize) -> Option<usize> {
    if cardinality < 4 || !cardinality.is_power_of_two() || !cardinality.trailing_zeros().is_multiple_of(2) {
        return None;
    }
    Some(1usize << (cardinality.trailing_zeros() / 2))
}

/// Odd-integer levels `−(L−1), …, −1, 1, …, L−1` of one quadrature.
pub fn grid_levels(side: usize) -> impl Iterator<Item = i64> + Clone {
    let side = side as i64;
    (0..side).map(move |i| 2 * i - (side - 1))
}

pub fn build_pcs_qam(cardinality: usize, nu: f64) -> Result<ConstellationSpec> {
    let side = grid_side(cardinality).ok_or_else(|| {
        Error::invalid(format!("cardinality {cardinality} is not a square QAM (even power of two ≥ 4)"))
    })?;
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::invalid(format!("shaping parameter ν = {nu} must be finite and ≥ 0")));
    }

    let mut points = Vec::with_capacity(cardinality);
    let mut energies = Vec::with_capacity(cardinality);
    for q in grid_levels(side) {
        for p in grid_levels(side) {
            points.push(Complex64::new(p as f64, q as f64));
            energies.push(p * p + q * q);
        }
    }
    // Weights relative to the innermost shell (energy 2) keep exp() in range.
    let weights: Vec<f64> = energies.iter().map(|&e| (-nu * (e - 2) as f64).exp()).collect();
    let total: f64 = weights.iter().sum();
    let probs = weights.into_iter().map(|w| w / total).collect();

    Ok(ConstellationSpec { cardinality, nu, points, probs, scale: 1.0 })
}

impl ConstellationSpec {
    pub fn side(&self) -> usize {
        grid_side(self.cardinality).expect("validated at construction")
    }

    /// `E[p²]` on the unit grid (no scale).
    pub fn grid_moment(&self) -> f64 {
        self.points.iter().zip(&self.probs).map(|(x, w)| w * x.re * x.re).sum()
    }

    /// Symbol amplitudes `scale·(p + iq)`.
    pub fn symbols(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.points.iter().map(move |&x| x * self.scale)
    }

    /// Write the constellation as `p,q,prob` CSV with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "p,q,prob")?;
        for (x, w) in self.points.iter().zip(&self.probs) {
            writeln!(out, "{},{},{:.16e}", x.re as i64, x.im as i64, w)?;
        }
        Ok(())
    }
}

/// Per-quadrature second moment of the symbol amplitude, `scale²·E[p²]`.
pub fn constellation_variance(spec: &ConstellationSpec) -> f64 {
    spec.scale * spec.scale * spec.grid_moment()
}

/// Modulation variance `V_A = 2·scale²·E[p²]` in shot-noise units.
pub fn modulation_variance(spec: &ConstellationSpec) -> f64 {
    2.0 * constellation_variance(spec)
}

/// Fix `scale` so that [`modulation_variance`] equals `target_va`.
pub fn scale_to_variance(spec: &ConstellationSpec, target_va: f64) -> Result<ConstellationSpec> {
    if !(target_va > 0.0) || !target_va.is_finite() {
        return Err(Error::invalid(format!("target V_A = {target_va} must be positive")));
    }
    let mut scaled = spec.clone();
    scaled.scale = (target_va / (2.0 * spec.grid_moment())).sqrt();
    Ok(scaled)
}

/// Coherent-state amplitude of a transmitted symbol.
#[inline]
pub fn coherent_amplitude(symbol: Complex64) -> Complex64 {
    symbol * std::f64::consts::FRAC_1_SQRT_2
}

/// Draw `n` i.i.d. symbols per polarisation. The two polarisations use
/// independent streams derived from `seed`.
pub fn sample_symbols(spec: &ConstellationSpec, n: usize, seed: u64) -> Result<SymbolBlock> {
    if n == 0 {
        return Err(Error::invalid("symbol count must be ≥ 1"));
    }
    let index = WeightedIndex::new(&spec.probs)
        .map_err(|e| Error::invalid(format!("bad constellation probabilities: {e}")))?;
    let draw = |stream: Stream| -> Vec<Complex64> {
        let mut rng = rng::rng(rng::stream(seed, stream));
        (0..n).map(|_| spec.points[index.sample(&mut rng)] * spec.scale).collect()
    };
    Ok(SymbolBlock {
        symbols_x: draw(Stream::SymbolsX),
        symbols_y: draw(Stream::SymbolsY),
        seed,
        modulation_variance: modulation_variance(spec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn qpsk_is_uniform_for_any_nu() {
        let spec = build_pcs_qam(4, 0.3).unwrap();
        for p in &spec.probs {
            assert_relative_eq!(*p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_nu_is_uniform() {
        let spec = build_pcs_qam(1024, 0.0).unwrap();
        assert_eq!(spec.points.len(), 1024);
        for p in &spec.probs {
            assert_relative_eq!(*p, 1.0 / 1024.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn large_nu_concentrates_on_inner_ring() {
        let spec = build_pcs_qam(16, 10.0).unwrap();
        let inner: f64 = spec
            .points
            .iter()
            .zip(&spec.probs)
            .filter(|(x, _)| x.norm_sqr() == 2.0)
            .map(|(_, w)| *w)
            .sum();
        assert!(inner >= 1.0 - 1e-10);
        for (x, w) in spec.points.iter().zip(&spec.probs) {
            if x.norm_sqr() == 2.0 {
                assert_relative_eq!(*w, 0.25, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn rejects_non_square_cardinality() {
        for k in [0, 2, 8, 32, 100, 512] {
            assert!(matches!(build_pcs_qam(k, 0.1), Err(Error::InvalidArgument(_))), "K = {k}");
        }
        assert!(build_pcs_qam(16, -0.1).is_err());
    }

    #[test]
    fn second_moments() {
        let qpsk = build_pcs_qam(4, 0.0).unwrap();
        assert_relative_eq!(constellation_variance(&qpsk), 1.0, epsilon = 1e-15);

        // Direct summation over the odd grid vs the closed form (K − 1)/3.
        let uniform = build_pcs_qam(1024, 0.0).unwrap();
        let direct: f64 = grid_levels(32).map(|p| (p * p) as f64).sum::<f64>() / 32.0;
        assert_relative_eq!(direct, 341.0, epsilon = 1e-12);
        assert_relative_eq!(constellation_variance(&uniform), 341.0, epsilon = 1e-10);

        let a = build_pcs_qam(256, 0.01).unwrap();
        let b = build_pcs_qam(256, 0.02).unwrap();
        assert!(constellation_variance(&b) < constellation_variance(&a));
    }

    #[test]
    fn scaling_examples() {
        let qpsk = scale_to_variance(&build_pcs_qam(4, 0.0).unwrap(), 5.0).unwrap();
        assert_relative_eq!(qpsk.scale, (5.0f64 / 2.0).sqrt(), epsilon = 1e-15);

        let uniform = scale_to_variance(&build_pcs_qam(1024, 0.0).unwrap(), 5.0).unwrap();
        assert_relative_eq!(uniform.scale, (5.0 / (2.0 * 341.0f64)).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(modulation_variance(&uniform), 5.0, epsilon = 1e-12);

        let again = scale_to_variance(&uniform, 5.0).unwrap();
        assert_relative_eq!(again.scale, uniform.scale, epsilon = 1e-12);
        assert!(scale_to_variance(&uniform, 0.0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = scale_to_variance(&build_pcs_qam(256, 0.05).unwrap(), 5.0).unwrap();
        let a = sample_symbols(&spec, 1000, 9).unwrap();
        let b = sample_symbols(&spec, 1000, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.symbols_x, a.symbols_y);
        assert!(sample_symbols(&spec, 0, 9).is_err());
    }

    #[test]
    fn csv_has_seventeen_digits() {
        let spec = build_pcs_qam(4, 0.0).unwrap();
        let mut buf = Vec::new();
        spec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("p,q,prob"));
        assert_eq!(lines.next(), Some("-1,-1,2.5000000000000000e-1"));
        assert_eq!(text.lines().count(), 5);
    }
}
