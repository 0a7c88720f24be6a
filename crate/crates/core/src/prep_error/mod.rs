//! Preparation error of shaped QAM: the trace distance between the
//! coherent-state ensemble of a shaped constellation and the thermal state
//! produced by ideal Gaussian modulation with the same `V_A`.
//!
//! Two evaluation paths exist. [`TruncatedState`] and [`trace_distance`] work
//! in double precision on dense Hermitian matrices and are meant for moderate
//! distances and for cross-checks. [`eps_prep`] and [`minimize_eps_prep`] use
//! MPFR arithmetic (256-bit mantissa by default) because distances around
//! `1e-16` and below sit under the eigenvalue noise floor of f64; they also
//! escalate the Fock cutoff until the truncation error is certified.

mod mp;

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::constellation::{coherent_amplitude, scale_to_variance, ConstellationSpec};
use crate::{Error, Result};

pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-12;

/// Density operator in the number basis `|0⟩ … |n_max⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedState {
    pub dim: usize,
    pub matrix: DMatrix<Complex64>,
    /// Probability mass lost beyond `n_max`, `|1 − Tr ρ|`.
    pub trace_defect: f64,
}

impl TruncatedState {
    pub fn n_max(&self) -> usize {
        self.dim - 1
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diagonal().iter().map(|z| z.re).sum()
    }

    pub fn mean_photon_number(&self) -> f64 {
        self.matrix.diagonal().iter().enumerate().map(|(n, z)| n as f64 * z.re).sum()
    }

    pub fn max_hermiticity_error(&self) -> f64 {
        let m = &self.matrix;
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.matrix.clone().symmetric_eigenvalues().iter().copied().collect()
    }

    /// `U ρ U†` with the phase-space rotation `U = diag(e^{inθ})`.
    pub fn rotated(&self, theta: f64) -> TruncatedState {
        let mut out = self.clone();
        for m in 0..self.dim {
            for n in 0..self.dim {
                out.matrix[(m, n)] *= Complex64::from_polar(1.0, (m as f64 - n as f64) * theta);
            }
        }
        out
    }

    /// Projector onto the Fock state `|n⟩`.
    pub fn fock(n: usize, n_max: usize) -> Result<TruncatedState> {
        if n > n_max {
            return Err(Error::invalid(format!("Fock index {n} above n_max {n_max}")));
        }
        let mut matrix = DMatrix::zeros(n_max + 1, n_max + 1);
        matrix[(n, n)] = Complex64::new(1.0, 0.0);
        Ok(TruncatedState { dim: n_max + 1, matrix, trace_defect: 0.0 })
    }
}

/// `P(X > n_max)` for a Poisson variable of mean `mean`.
pub fn poisson_tail(mean: f64, n_max: usize) -> f64 {
    mp::poisson_tail(mean, n_max)
}

fn coherent_coefficients(alpha: Complex64, n_max: usize) -> Vec<Complex64> {
    let r2 = alpha.norm_sqr();
    if r2 == 0.0 {
        let mut c = vec![Complex64::new(0.0, 0.0); n_max + 1];
        c[0] = Complex64::new(1.0, 0.0);
        return c;
    }
    let (ln_r, theta) = (alpha.norm().ln(), alpha.arg());
    (0..=n_max)
        .map(|n| {
            let n_f = n as f64;
            let magnitude = (-0.5 * r2 + n_f * ln_r - 0.5 * ln_gamma(n_f + 1.0)).exp();
            Complex64::from_polar(magnitude, n_f * theta)
        })
        .collect()
}

pub fn coherent_state(alpha: Complex64, n_max: usize) -> Result<TruncatedState> {
    coherent_state_with_tolerance(alpha, n_max, DEFAULT_TRUNCATION_TOL)
}

pub fn coherent_state_with_tolerance(alpha: Complex64, n_max: usize, tol: f64) -> Result<TruncatedState> {
    if n_max < 1 {
        return Err(Error::invalid("n_max must be ≥ 1"));
    }
    let tail = poisson_tail(alpha.norm_sqr(), n_max);
    if tail > tol {
        return Err(Error::Truncation { n_max, tail, tolerance: tol });
    }
    let c = coherent_coefficients(alpha, n_max);
    let matrix = DMatrix::from_fn(n_max + 1, n_max + 1, |m, n| c[m] * c[n].conj());
    Ok(TruncatedState { dim: n_max + 1, matrix, trace_defect: tail })
}

/// `ρ = Σ_k P_k |α_k⟩⟨α_k|` for a scaled constellation, `α_k = s_k / √2`.
pub fn ensemble_density(spec: &ConstellationSpec, n_max: usize) -> Result<TruncatedState> {
    ensemble_density_with_tolerance(spec, n_max, DEFAULT_TRUNCATION_TOL)
}

pub fn ensemble_density_with_tolerance(
    spec: &ConstellationSpec,
    n_max: usize,
    tol: f64,
) -> Result<TruncatedState> {
    if n_max < 1 {
        return Err(Error::invalid("n_max must be ≥ 1"));
    }
    let dim = n_max + 1;
    let mut matrix = DMatrix::<Complex64>::zeros(dim, dim);
    let mut tail = 0.0;
    for (symbol, &w) in spec.symbols().zip(&spec.probs) {
        let alpha = coherent_amplitude(symbol);
        let c = coherent_coefficients(alpha, n_max);
        for n in 0..dim {
            let right = c[n].conj() * w;
            for m in 0..dim {
                matrix[(m, n)] += c[m] * right;
            }
        }
        tail += w * poisson_tail(alpha.norm_sqr(), n_max);
    }
    if tail > tol {
        return Err(Error::Truncation { n_max, tail, tolerance: tol });
    }
    Ok(TruncatedState { dim, matrix, trace_defect: tail })
}

/// Thermal state of mean photon number `nbar`, not renormalised.
pub fn thermal_state(nbar: f64, n_max: usize) -> Result<TruncatedState> {
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(Error::invalid(format!("mean photon number {nbar} must be ≥ 0")));
    }
    let dim = n_max + 1;
    let ratio = nbar / (nbar + 1.0);
    let mut matrix = DMatrix::zeros(dim, dim);
    let mut p = 1.0 / (nbar + 1.0);
    for n in 0..dim {
        matrix[(n, n)] = Complex64::new(p, 0.0);
        p *= ratio;
    }
    Ok(TruncatedState { dim, matrix, trace_defect: ratio.powi(dim as i32) })
}

/// `½ Σ |λ_i(ρ − σ)|`.
pub fn trace_distance(rho: &TruncatedState, sigma: &TruncatedState) -> Result<f64> {
    if rho.dim != sigma.dim {
        return Err(Error::DimensionMismatch(rho.dim, sigma.dim));
    }
    let diff = &rho.matrix - &sigma.matrix;
    let sum: f64 = diff.symmetric_eigenvalues().iter().map(|l| l.abs()).sum();
    Ok((0.5 * sum).clamp(0.0, 1.0))
}

/// Double-precision preparation error at a fixed cutoff (no certification).
pub fn eps_prep_f64(cardinality: usize, nu: f64, target_va: f64, n_max: usize) -> Result<f64> {
    let spec = scale_to_variance(&crate::constellation::build_pcs_qam(cardinality, nu)?, target_va)?;
    let rho = ensemble_density_with_tolerance(&spec, n_max, 1.0)?;
    let sigma = thermal_state(target_va / 2.0, n_max)?;
    trace_distance(&rho, &sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepErrorOptions {
    /// MPFR mantissa bits.
    pub precision_bits: u32,
    /// Starting Fock cutoff.
    pub n_max: usize,
    pub n_max_step: usize,
    pub n_max_cap: usize,
    /// Accept when `truncation_bound ≤ max(rel_tolerance·eps, abs_tolerance)`.
    pub rel_tolerance: f64,
    pub abs_tolerance: f64,
    /// Golden-section stopping width on `ln ν`.
    pub ln_nu_tolerance: f64,
}

impl Default for PrepErrorOptions {
    fn default() -> Self {
        PrepErrorOptions {
            precision_bits: 256,
            n_max: 60,
            n_max_step: 20,
            n_max_cap: 400,
            rel_tolerance: 0.1,
            abs_tolerance: 1e-40,
            ln_nu_tolerance: 2e-4,
        }
    }
}

impl PrepErrorOptions {
    fn accepts(&self, eps: f64, bound: f64) -> bool {
        bound <= (self.rel_tolerance * eps).max(self.abs_tolerance)
    }

    /// Next cutoff: at least one step, and enough for the thermal tail alone
    /// to meet a quarter of the tolerance.
    fn next_cutoff(&self, current: usize, eps: f64, target_va: f64) -> usize {
        let nbar = target_va / 2.0;
        let target = 0.25 * (self.rel_tolerance * eps).max(self.abs_tolerance);
        let ratio = nbar / (nbar + 1.0);
        let needed = if ratio > 0.0 && target > 0.0 {
            (target.ln() / ratio.ln()).ceil().max(0.0) as usize
        } else {
            0
        };
        (current + self.n_max_step).max(needed)
    }
}

/// One certified preparation-error evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepError {
    pub cardinality: usize,
    pub target_va: f64,
    pub nu: f64,
    /// Trace distance of the truncated operators; the untruncated value lies
    /// in `[eps, eps + truncation_bound]`.
    pub eps: f64,
    pub truncation_bound: f64,
    pub n_max: usize,
    pub precision_bits: u32,
}

fn check_inputs(target_va: f64, nu: f64) -> Result<()> {
    if !(target_va > 0.0) || !target_va.is_finite() {
        return Err(Error::invalid(format!("target V_A = {target_va} must be positive")));
    }
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::invalid(format!("ν = {nu} must be ≥ 0")));
    }
    Ok(())
}

/// Preparation error at fixed `ν`, escalating the cutoff from `n_max` as needed.
pub fn eps_prep(cardinality: usize, nu: f64, target_va: f64, n_max: usize) -> Result<PrepError> {
    let opts = PrepErrorOptions { n_max, ..PrepErrorOptions::default() };
    eps_prep_with(cardinality, nu, target_va, &opts)
}

pub fn eps_prep_with(cardinality: usize, nu: f64, target_va: f64, opts: &PrepErrorOptions) -> Result<PrepError> {
    check_inputs(target_va, nu)?;
    let mut n = opts.n_max.max(1);
    loop {
        let ev = mp::evaluate(cardinality, nu, target_va, n, opts.precision_bits, true)?;
        let eps = ev.eps.to_f64();
        let bound = ev.bound.expect("certified evaluation");
        if opts.accepts(eps, bound) {
            return Ok(PrepError {
                cardinality,
                target_va,
                nu,
                eps,
                truncation_bound: bound,
                n_max: n,
                precision_bits: opts.precision_bits,
            });
        }
        let next = opts.next_cutoff(n, eps, target_va);
        if next > opts.n_max_cap {
            return Err(Error::Truncation {
                n_max: n,
                tail: bound,
                tolerance: (opts.rel_tolerance * eps).max(opts.abs_tolerance),
            });
        }
        n = next;
    }
}

/// Upper end of the ν search bracket: four times the ν whose Gaussian
/// envelope has the grid half-width at six standard deviations.
pub fn nu_search_upper(cardinality: usize) -> Result<f64> {
    let side = crate::constellation::grid_side(cardinality)
        .ok_or_else(|| Error::invalid(format!("cardinality {cardinality} is not a square QAM")))?;
    let half_width = (side - 1) as f64;
    let nu_match = 18.0 / (half_width * half_width);
    Ok(4.0 * nu_match)
}

struct Search<'a> {
    cardinality: usize,
    target_va: f64,
    n_max: usize,
    opts: &'a PrepErrorOptions,
}

impl Search<'_> {
    fn eps(&self, nu: f64) -> Result<f64> {
        Ok(mp::evaluate(self.cardinality, nu, self.target_va, self.n_max, self.opts.precision_bits, false)?
            .eps
            .to_f64())
    }

    /// Golden-section search on `ln ν ∈ [lo, hi]`.
    fn golden(&self, mut lo: f64, mut hi: f64) -> Result<(f64, f64)> {
        const INV_PHI: f64 = 0.618_033_988_749_894_9;
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let mut f1 = self.eps(x1.exp())?;
        let mut f2 = self.eps(x2.exp())?;
        for _ in 0..80 {
            let settled = (f1 - f2).abs() <= 0.01 * f1.min(f2);
            if hi - lo < self.opts.ln_nu_tolerance && settled {
                break;
            }
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = self.eps(x1.exp())?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = self.eps(x2.exp())?;
            }
        }
        Ok(if f1 <= f2 { (x1, f1) } else { (x2, f2) })
    }

    /// Log-spaced grid scan followed by golden section between the best
    /// point's neighbours.
    fn grid_refine(&self, lo: f64, hi: f64) -> Result<(f64, f64)> {
        const POINTS: usize = 17;
        let xs: Vec<f64> = (0..POINTS).map(|i| lo + (hi - lo) * i as f64 / (POINTS - 1) as f64).collect();
        let fs = xs.iter().map(|&x| self.eps(x.exp())).collect::<Result<Vec<_>>>()?;
        let best = (0..POINTS).min_by(|&a, &b| fs[a].total_cmp(&fs[b])).expect("non-empty grid");
        let a = xs[best.saturating_sub(1)];
        let b = xs[(best + 1).min(POINTS - 1)];
        let (x, f) = self.golden(a, b)?;
        Ok(if f <= fs[best] { (x, f) } else { (xs[best], fs[best]) })
    }

    fn minimize(&self, lo: f64, hi: f64) -> Result<(f64, f64)> {
        let (x, f) = self.golden(lo, hi)?;
        // Bracket failure: the optimum hugs an end of the interval.
        let margin = 4.0 * self.opts.ln_nu_tolerance.max(1e-3);
        let (x, f) = if x - lo < margin || hi - x < margin { self.grid_refine(lo, hi)? } else { (x, f) };
        let at_zero = self.eps(0.0)?;
        Ok(if at_zero < f { (f64::NEG_INFINITY, at_zero) } else { (x, f) })
    }
}

/// Minimise the preparation error over `ν` at fixed `V_A`.
pub fn minimize_eps_prep(cardinality: usize, target_va: f64, n_max: usize) -> Result<PrepError> {
    let opts = PrepErrorOptions { n_max, ..PrepErrorOptions::default() };
    minimize_eps_prep_with(cardinality, target_va, &opts)
}

pub fn minimize_eps_prep_with(cardinality: usize, target_va: f64, opts: &PrepErrorOptions) -> Result<PrepError> {
    check_inputs(target_va, 0.0)?;
    let upper = nu_search_upper(cardinality)?;
    let (mut lo, mut hi) = ((upper * 1e-3).ln(), upper.ln());
    let mut n = opts.n_max.max(1);
    loop {
        let search = Search { cardinality, target_va, n_max: n, opts };
        let (ln_nu, _) = search.minimize(lo, hi)?;
        let nu = ln_nu.exp();
        let ev = mp::evaluate(cardinality, nu, target_va, n, opts.precision_bits, true)?;
        let eps = ev.eps.to_f64();
        let bound = ev.bound.expect("certified evaluation");
        if opts.accepts(eps, bound) {
            return Ok(PrepError {
                cardinality,
                target_va,
                nu,
                eps,
                truncation_bound: bound,
                n_max: n,
                precision_bits: opts.precision_bits,
            });
        }
        let next = opts.next_cutoff(n, eps, target_va);
        if next > opts.n_max_cap {
            return Err(Error::Truncation {
                n_max: n,
                tail: bound,
                tolerance: (opts.rel_tolerance * eps).max(opts.abs_tolerance),
            });
        }
        n = next;
        if ln_nu.is_finite() {
            lo = lo.max(ln_nu - 3f64.ln());
            hi = hi.min(ln_nu + 3f64.ln());
        }
    }
}

/// CSV with columns `cardinality,VA,nu_opt,eps_prep,truncation_bound,nmax`.
pub fn write_sweep_csv<W: Write>(rows: &[PrepError], mut out: W) -> Result<()> {
    writeln!(out, "cardinality,VA,nu_opt,eps_prep,truncation_bound,nmax")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.10e},{:.10e},{:.3e},{}",
            r.cardinality, r.target_va, r.nu, r.eps, r.truncation_bound, r.n_max
        )?;
    }
    Ok(())
}
