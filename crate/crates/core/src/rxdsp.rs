//! Receiver DSP: downconversion and matched filtering, preamble
//! synchronisation, pilot-driven CMA polarisation demultiplexing, periodogram
//! frequency estimation and pilot-aided phase tracking.
//!
//! Samples are normalised to shot-noise units with the calibration scale
//! first, and every later stage keeps white receiver noise at unit gain, so
//! recovered symbols stay in SNU.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::channel::CalibrationRecord;
use crate::txframe::{dot, oscillator, raised_cosine, rrc_value, IQWaveform, PilotReference, SymbolFrame};
use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub cma_taps: usize,
    pub cma_step: f64,
    /// Passes over the pilots; the step is divided by 4 after each pass.
    pub cma_iterations: usize,
    /// Relative change of the windowed CM error that counts as converged.
    pub cma_tolerance: f64,
    pub cma_window: usize,
    /// Divergence when the last window exceeds this multiple of the best one.
    pub cma_divergence_factor: f64,
    /// Start the CMA from a least-squares Jones matrix fitted on the first
    /// pilots instead of the identity.
    pub cma_pilot_init: bool,
    pub periodogram_fft_size: usize,
    pub cfo_min_pilots: usize,
    pub cfo_peak_threshold_db: f64,
    /// Remove the pilot-periodogram CFO before the equaliser (otherwise after).
    pub cfo_before_cma: bool,
    pub phase_pilot_window: usize,
    /// Symbol lags (each side) over which known-pilot interference is
    /// estimated and removed from quantum symbols; 0 disables.
    pub pilot_cancellation_span: usize,
    pub rolloff: f64,
    /// One-sided matched-filter extent in symbols.
    pub filter_span: usize,
    pub symbol_rate: f64,
    pub sync_psr_threshold: f64,
    pub sync_search_symbols: usize,
    /// Symbols per coherent segment in the preamble correlator.
    pub sync_segment: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            cma_taps: 9,
            cma_step: 1e-3,
            cma_iterations: 3,
            cma_tolerance: 0.01,
            cma_window: 1000,
            cma_divergence_factor: 10.0,
            cma_pilot_init: true,
            periodogram_fft_size: 1 << 17,
            cfo_min_pilots: 1 << 14,
            cfo_peak_threshold_db: 6.0,
            cfo_before_cma: true,
            phase_pilot_window: 16,
            pilot_cancellation_span: 6,
            rolloff: 1.0,
            filter_span: 32,
            symbol_rate: 400e6,
            sync_psr_threshold: 3.0,
            sync_search_symbols: 4096,
            sync_segment: 4,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cma_taps.is_multiple_of(2) || self.cma_taps == 0 {
            return Err(Error::invalid(format!("CMA taps {} must be odd", self.cma_taps)));
        }
        if !(self.cma_step > 0.0 && self.cma_step <= 0.1) {
            return Err(Error::invalid(format!("CMA step {} outside (0, 0.1]", self.cma_step)));
        }
        if self.cma_iterations == 0 || self.cma_window < 2 {
            return Err(Error::invalid("CMA needs ≥ 1 pass and a window of ≥ 2 pilots"));
        }
        if !(0.0..=1.0).contains(&self.rolloff) || self.filter_span < 4 {
            return Err(Error::invalid("roll-off must lie in [0, 1] and the filter span be ≥ 4"));
        }
        if !self.periodogram_fft_size.is_power_of_two() || self.phase_pilot_window == 0 {
            return Err(Error::invalid("periodogram size must be a power of two and the phase window ≥ 1"));
        }
        if self.sync_segment == 0 || self.sync_search_symbols == 0 || !(self.symbol_rate > 0.0) {
            return Err(Error::invalid("sync segment, search window and symbol rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DspStage {
    MatchedFilter,
    Synchronization,
    CoarseCfo,
    Equalization,
    FineCfo,
    PhaseTracking,
    PilotCancellation,
}

/// Per-stage diagnostics; recovered symbols live in the output frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DspReport {
    pub stages: Vec<DspStage>,
    /// Estimated channel delay in samples (pulse peak of symbol 0 minus the
    /// transmitter's filter delay).
    pub timing_offset: f64,
    pub sync_psr: f64,
    pub cfo_coarse_hz: f64,
    /// Total carrier frequency offset removed.
    pub cfo_estimate_hz: f64,
    pub cfo_peak_db: f64,
    pub cma_converged: bool,
    /// Mean CM error over the last window of the final pass.
    pub cma_residual: f64,
    pub cma_reinitialized: bool,
    pub pol_swapped: bool,
    /// Phase estimate at each pilot, per polarisation (radians, unwrapped).
    pub phase_track: [Vec<f64>; 2],
    pub tracking_losses: usize,
    /// Largest removed pilot-interference coefficient relative to the pilot gain.
    pub max_pilot_leakage: f64,
    /// Complex pilot gain magnitude per polarisation.
    pub pilot_gain: [f64; 2],
    pub snr_estimate_db: [f64; 2],
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DspOutput {
    pub frame: SymbolFrame,
    pub report: DspReport,
}

/// A stage error together with the diagnostics gathered before it.
#[derive(Debug)]
pub struct DspFailure {
    pub error: Error,
    pub report: DspReport,
}

impl fmt::Display for DspFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after stages {:?})", self.error, self.report.stages)
    }
}

impl std::error::Error for DspFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<DspFailure> for Error {
    fn from(f: DspFailure) -> Error {
        f.error
    }
}

/// Continuous-time RRC matched filter evaluated at arbitrary sample times.
///
/// Each fractional sampling phase gets its own unit-energy tap set, so
/// white input noise leaves the filter with unchanged variance.
#[derive(Debug, Clone)]
pub struct MatchedFilter {
    rolloff: f64,
    samples_per_symbol: f64,
    half_width: isize,
}

impl MatchedFilter {
    pub fn new(rolloff: f64, samples_per_symbol: f64, span_symbols: usize) -> MatchedFilter {
        let half_width = (span_symbols as f64 * samples_per_symbol).floor() as isize;
        MatchedFilter { rolloff, samples_per_symbol, half_width }
    }

    /// Taps `h(n − base − φ)` for `n − base + W ∈ 0..2W+2`, i.e. in the
    /// order of the input samples they multiply.
    fn taps(&self, phase: f64) -> Vec<f64> {
        let w = self.half_width;
        let limit = w as f64;
        let mut taps: Vec<f64> = (-w..=w + 1)
            .map(|k| {
                let t = k as f64 - phase;
                if t.abs() <= limit {
                    rrc_value(t / self.samples_per_symbol, self.rolloff)
                } else {
                    0.0
                }
            })
            .collect();
        let norm = taps.iter().map(|h| h * h).sum::<f64>().sqrt();
        taps.iter_mut().for_each(|h| *h /= norm);
        taps
    }

    /// `y(t) = Σ_n x[n]·h(t − n)` for a single time.
    pub fn sample(&self, x: &[Complex64], t: f64) -> Complex64 {
        let base = t.floor();
        let taps = self.taps(t - base);
        let (re, im) = split(x);
        self.apply(&re, &im, base as isize, &taps)
    }

    fn apply(&self, re: &[f64], im: &[f64], base: isize, taps: &[f64]) -> Complex64 {
        let first = base - self.half_width;
        let lo = first.max(0);
        let hi = (first + taps.len() as isize).min(re.len() as isize);
        if hi <= lo {
            return ZERO;
        }
        let (lo, hi) = (lo as usize, hi as usize);
        let k0 = (lo as isize - first) as usize;
        let h = &taps[k0..k0 + hi - lo];
        Complex64::new(dot(&re[lo..hi], h), dot(&im[lo..hi], h))
    }

    /// Samples at `t0 + m·num/den` for `m ∈ 0..count`.
    pub fn sample_grid(&self, x: &[Complex64], t0: f64, num: usize, den: usize, count: usize) -> Vec<Complex64> {
        let base0 = t0.floor();
        let phase0 = t0 - base0;
        let tap_sets: Vec<(f64, Vec<f64>)> = (0..den)
            .map(|r| {
                let phase = phase0 + r as f64 / den as f64;
                let carry = phase.floor();
                (carry, self.taps(phase - carry))
            })
            .collect();
        let (re, im) = split(x);
        (0..count)
            .map(|m| {
                let q = m * num / den;
                let r = m * num % den;
                let (carry, taps) = &tap_sets[r];
                self.apply(&re, &im, base0 as isize + q as isize + *carry as isize, taps)
            })
            .collect()
    }
}

fn split(x: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    (x.iter().map(|z| z.re).collect(), x.iter().map(|z| z.im).collect())
}

fn samples_per_symbol_ratio(sample_rate: f64, symbol_rate: f64) -> Result<(usize, usize)> {
    let ratio = sample_rate / symbol_rate;
    for den in 1..=64usize {
        let num = (ratio * den as f64).round();
        if (num / den as f64 - ratio).abs() < 1e-9 * ratio {
            return Ok((num as usize, den));
        }
    }
    Err(Error::invalid(format!("samples per symbol {ratio} is not a small rational")))
}

/// Multiply by `exp(−i2π f n / fs)` and by `gain`.
pub fn downconvert(x: &[Complex64], frequency: f64, sample_rate: f64, gain: f64) -> Vec<Complex64> {
    let w = -2.0 * PI * frequency / sample_rate;
    x.iter().zip(oscillator(w)).map(|(z, lo)| z * lo * gain).collect()
}

/// Downconvert both polarisations and return matched-filter outputs at two
/// samples per symbol, starting at sample time `t0`.
pub fn matched_filter_and_downconvert(
    wave: &IQWaveform,
    config: &DspConfig,
    t0: f64,
    n_symbols: usize,
) -> Result<[Vec<Complex64>; 2]> {
    let (num, den) = samples_per_symbol_ratio(wave.sample_rate, config.symbol_rate)?;
    let mf = MatchedFilter::new(config.rolloff, num as f64 / den as f64, config.filter_span);
    let pol = |x: &[Complex64]| {
        let base = downconvert(x, wave.center_frequency, wave.sample_rate, 1.0);
        mf.sample_grid(&base, t0, num, 2 * den, 2 * n_symbols)
    };
    Ok([pol(&wave.x), pol(&wave.y)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncResult {
    /// Sample time of the first preamble symbol's pulse peak.
    pub symbol_time: f64,
    pub psr: f64,
    pub cfo_hz: f64,
}

/// Segment sums `c_ij(s) = Σ_{k∈s} y_i[k]·conj(p_j[k])`.
fn segment_sums(y: &[&[Complex64]; 2], preamble: &[Vec<Complex64>; 2], segment: usize, stride: usize, offset: usize) -> [[Vec<Complex64>; 2]; 2] {
    let len = preamble[0].len();
    let n_seg = len.div_ceil(segment);
    let mut c: [[Vec<Complex64>; 2]; 2] = Default::default();
    for i in 0..2 {
        for j in 0..2 {
            let mut sums = vec![ZERO; n_seg];
            for (k, p) in preamble[j].iter().enumerate() {
                let idx = offset + stride * k;
                if let Some(v) = y[i].get(idx) {
                    sums[k / segment] += v * p.conj();
                }
            }
            c[i][j] = sums;
        }
    }
    c
}

/// Frequency- and phase-insensitive preamble metric: the X-root and Y-root
/// correlations share the carrier rotation, which cancels in their product.
fn sync_metric(c: &[[Vec<Complex64>; 2]; 2]) -> f64 {
    let mut total = 0.0;
    for cx in c.iter() {
        for cy in c.iter() {
            let s: Complex64 = cx[0].iter().zip(&cy[1]).map(|(a, b)| a * b.conj()).sum();
            total += s.norm();
        }
    }
    total
}

/// Coarse timing over the search window, golden-section refinement of the
/// continuous sampling time, and coarse CFO from adjacent segments.
pub fn synchronize(baseband: &[Vec<Complex64>; 2], reference: &PilotReference, config: &DspConfig, sample_rate: f64) -> Result<SyncResult> {
    let (num, den) = samples_per_symbol_ratio(sample_rate, config.symbol_rate)?;
    let sps = num as f64 / den as f64;
    let mf = MatchedFilter::new(config.rolloff, sps, config.filter_span);
    let preamble = &reference.preamble;
    let len = preamble[0].len();
    let lags = 2 * config.sync_search_symbols;
    let count = lags + 2 * len;
    let margin = (config.filter_span as f64 * sps).ceil() as usize + 2;
    // Window of the input needed for times in [t_lo, t_hi].
    let window = |x: &[Complex64], t_lo: f64, t_hi: f64| -> (usize, usize) {
        let lo = (t_lo.floor() as usize).saturating_sub(margin).min(x.len());
        let hi = (t_hi.ceil() as usize + margin).min(x.len());
        (lo, hi)
    };
    let coarse_end = count as f64 * sps / 2.0;
    let coarse: Vec<Vec<Complex64>> = baseband
        .iter()
        .map(|x| {
            let (lo, hi) = window(x, 0.0, coarse_end);
            mf.sample_grid(&x[lo..hi], -(lo as f64), num, 2 * den, count)
        })
        .collect();
    let metric: Vec<f64> = (0..lags)
        .map(|lag| sync_metric(&segment_sums(&[&coarse[0], &coarse[1]], preamble, config.sync_segment, 2, lag)))
        .collect();
    let (best, peak) = metric.iter().enumerate().fold((0, f64::MIN), |a, (i, &m)| if m > a.1 { (i, m) } else { a });
    let sidelobe = metric
        .iter()
        .enumerate()
        .filter(|(i, _)| i.abs_diff(best) > 2)
        .map(|(_, &m)| m)
        .fold(0.0, f64::max);
    let psr = if sidelobe > 0.0 { peak / sidelobe } else { f64::INFINITY };
    if !(psr >= config.sync_psr_threshold) {
        return Err(Error::SyncFailure { psr, threshold: config.sync_psr_threshold });
    }

    let half = sps / 2.0;
    let at = |t: f64| -> [[Vec<Complex64>; 2]; 2] {
        let y: Vec<Vec<Complex64>> = baseband
            .iter()
            .map(|x| {
                let (lo, hi) = window(x, t, t + len as f64 * sps);
                mf.sample_grid(&x[lo..hi], t - lo as f64, num, den, len)
            })
            .collect();
        segment_sums(&[&y[0], &y[1]], preamble, config.sync_segment, 1, 0)
    };
    let centre = best as f64 * half;
    let (mut a, mut b) = ((centre - half).max(0.0), centre + half);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = sync_metric(&at(x1));
    let mut f2 = sync_metric(&at(x2));
    while b - a > 1e-3 {
        if f1 > f2 {
            b = x2;
            (x2, f2) = (x1, f1);
            x1 = b - ratio * (b - a);
            f1 = sync_metric(&at(x1));
        } else {
            a = x1;
            (x1, f1) = (x2, f2);
            x2 = a + ratio * (b - a);
            f2 = sync_metric(&at(x2));
        }
    }
    let symbol_time = 0.5 * (a + b);

    let c = at(symbol_time);
    let mut acc = ZERO;
    for row in &c {
        for sums in row {
            acc += sums.windows(2).map(|w| w[1] * w[0].conj()).sum::<Complex64>();
        }
    }
    let cfo_hz = acc.arg() * config.symbol_rate / (2.0 * PI * config.sync_segment as f64);
    Ok(SyncResult { symbol_time, psr, cfo_hz })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfoEstimate {
    pub hz: f64,
    /// Periodogram peak over its median, dB.
    pub peak_db: f64,
    pub resolution_hz: f64,
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Periodogram frequency estimate from pilot products `r_k·conj(a_k)`.
///
/// `pairs` holds (received, known) pilot sequences aligned with `positions`
/// (symbol indices); their periodograms are summed.
pub fn estimate_cfo(
    pairs: &[(&[Complex64], &[Complex64])],
    positions: &[usize],
    symbol_rate: f64,
    config: &DspConfig,
) -> Result<CfoEstimate> {
    if positions.len() < config.cfo_min_pilots.max(2) {
        return Err(Error::invalid(format!(
            "{} pilots, need ≥ {}",
            positions.len(),
            config.cfo_min_pilots.max(2)
        )));
    }
    for (r, a) in pairs {
        if r.len() != positions.len() || a.len() != positions.len() {
            return Err(Error::DimensionMismatch(r.len().min(a.len()), positions.len()));
        }
    }
    let first = positions[0];
    let step = positions.windows(2).fold(0, |g, w| gcd(g, w[1] - w[0])).max(1);
    let span = (positions[positions.len() - 1] - first) / step + 1;
    let n = config.periodogram_fft_size.max(span.next_power_of_two());
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut power = vec![0.0; n];
    for (r, a) in pairs {
        let mut buf = vec![ZERO; n];
        for ((&p, rv), av) in positions.iter().zip(r.iter()).zip(a.iter()) {
            buf[(p - first) / step] = rv * av.conj();
        }
        fft.process(&mut buf);
        power.iter_mut().zip(&buf).for_each(|(s, z)| *s += z.norm_sqr());
    }
    let (k, peak) = power.iter().enumerate().fold((0, f64::MIN), |a, (i, &p)| if p > a.1 { (i, p) } else { a });
    let mut sorted = power.clone();
    let mid = n / 2;
    let median = *sorted.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1;
    let peak_db = 10.0 * (peak / median.max(f64::MIN_POSITIVE)).log10();
    if !(peak_db >= config.cfo_peak_threshold_db) {
        return Err(Error::CfoFailure { peak_db, threshold_db: config.cfo_peak_threshold_db });
    }
    let (l, r) = (power[(k + n - 1) % n].sqrt(), power[(k + 1) % n].sqrt());
    let c = peak.sqrt();
    let denom = l - 2.0 * c + r;
    let delta = if denom.abs() > 0.0 { (0.5 * (l - r) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let bin = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } + delta;
    let pilot_rate = symbol_rate / step as f64;
    Ok(CfoEstimate { hz: bin * pilot_rate / n as f64, peak_db, resolution_hz: pilot_rate / n as f64 })
}

/// Rotate `x[k]` by `exp(−i2π f (k·spacing)/symbol_rate)`.
fn derotate(x: &mut [Complex64], hz: f64, symbol_rate: f64, spacing: f64) {
    let w = -2.0 * PI * hz * spacing / symbol_rate;
    x.iter_mut().enumerate().for_each(|(k, z)| *z *= Complex64::from_polar(1.0, w * k as f64));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaResult {
    /// Butterfly taps `w[i][j][t]` acting on two-sample-per-symbol input.
    pub taps: [[Vec<Complex64>; 2]; 2],
    /// Equalised symbol-rate outputs with unit white-noise gain.
    pub outputs: [Vec<Complex64>; 2],
    pub converged: bool,
    pub residual: f64,
    pub reinitialized: bool,
    pub swapped: bool,
}

/// Windowed CM-error means for convergence and divergence checks.
fn window_means(errors: &[f64], window: usize) -> Vec<(f64, f64)> {
    errors
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let v = c.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64;
            (m, (v / c.len() as f64).sqrt())
        })
        .collect()
}

fn cma_output(taps: &[[Vec<Complex64>; 2]; 2], u: &[Vec<Complex64>; 2], k: usize, i: usize) -> Complex64 {
    let centre = (taps[0][0].len() - 1) / 2;
    let mut acc = ZERO;
    for j in 0..2 {
        for (t, w) in taps[i][j].iter().enumerate() {
            if let Some(idx) = (2 * k + centre).checked_sub(t) {
                if let Some(v) = u[j].get(idx) {
                    acc += w * v;
                }
            }
        }
    }
    acc
}

/// Least-squares 2×2 inverse channel from the first `count` pilots, scaled so
/// that pilots come out with unit modulus. `None` if the fit is singular.
pub fn pilot_jones_init(
    u: &[Vec<Complex64>; 2],
    pilot_symbols: &[usize],
    pilots: &[Vec<Complex64>],
    count: usize,
) -> Option<[[Complex64; 2]; 2]> {
    let mut r_up = [[ZERO; 2]; 2];
    let mut r_pp = [[ZERO; 2]; 2];
    let mut power = 0.0;
    let mut used = 0;
    for (n, &k) in pilot_symbols.iter().take(count).enumerate() {
        let (Some(a), Some(b)) = (u[0].get(2 * k), u[1].get(2 * k)) else { break };
        let (uk, pk) = ([*a, *b], [pilots[0][n], pilots[1][n]]);
        for i in 0..2 {
            for j in 0..2 {
                r_up[i][j] += uk[i] * pk[j].conj();
                r_pp[i][j] += pk[i] * pk[j].conj();
            }
        }
        power += pk[0].norm_sqr() + pk[1].norm_sqr();
        used += 1;
    }
    if used < 16 {
        return None;
    }
    // M = R_pp · R_up⁻¹ maps received samples back to pilots.
    let det = r_up[0][0] * r_up[1][1] - r_up[0][1] * r_up[1][0];
    let norm = r_up.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>();
    if !(det.norm() > 1e-6 * norm) {
        return None;
    }
    let inv = [[r_up[1][1] / det, -r_up[0][1] / det], [-r_up[1][0] / det, r_up[0][0] / det]];
    let amplitude = (power / (2 * used) as f64).sqrt();
    let mut m = [[ZERO; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = (r_pp[i][0] * inv[0][j] + r_pp[i][1] * inv[1][j]) / amplitude;
        }
    }
    m.iter().flatten().all(|z| z.is_finite()).then_some(m)
}

/// Pilot-driven 2×2 CMA at two samples per symbol.
///
/// Tap updates use the CM error at pilot symbols only; after the final pass
/// the frozen taps filter the whole frame. `pilot_symbols` are symbol
/// indices; `u[j][2k]` is the sample at symbol `k`.
pub fn cma_equalize(
    u: &[Vec<Complex64>; 2],
    pilot_symbols: &[usize],
    n_symbols: usize,
    rolloff: f64,
    config: &DspConfig,
) -> Result<CmaResult> {
    cma_equalize_from(u, pilot_symbols, n_symbols, rolloff, config, None)
}

/// [`cma_equalize`] with centre taps started at `initial` (acting on the
/// unscaled input) instead of the identity.
pub fn cma_equalize_from(
    u: &[Vec<Complex64>; 2],
    pilot_symbols: &[usize],
    n_symbols: usize,
    rolloff: f64,
    config: &DspConfig,
    initial: Option<[[Complex64; 2]; 2]>,
) -> Result<CmaResult> {
    config.validate()?;
    if pilot_symbols.is_empty() {
        return Err(Error::invalid("CMA needs pilots"));
    }
    let power: f64 = pilot_symbols
        .iter()
        .map(|&k| u[0].get(2 * k).map_or(0.0, |z| z.norm_sqr()) + u[1].get(2 * k).map_or(0.0, |z| z.norm_sqr()))
        .sum::<f64>()
        / (2 * pilot_symbols.len()) as f64;
    if !(power > 0.0) {
        return Err(Error::EqualizerDivergence("no pilot power at the equaliser input".into()));
    }
    let scale = power.sqrt().recip();
    let u: [Vec<Complex64>; 2] = [u[0].iter().map(|z| z * scale).collect(), u[1].iter().map(|z| z * scale).collect()];
    let n_taps = config.cma_taps;
    let centre = (n_taps - 1) / 2;
    let mut taps: [[Vec<Complex64>; 2]; 2] = Default::default();
    for (i, row) in taps.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            *w = vec![ZERO; n_taps];
            w[centre] = match initial {
                Some(m) => m[i][j] / scale,
                None if i == j => Complex64::new(1.0, 0.0),
                None => ZERO,
            };
        }
    }

    let mut reinitialized = false;
    let mut residual = f64::NAN;
    let mut converged = false;
    let mut step = config.cma_step;
    for pass in 0..config.cma_iterations {
        let mut errors = Vec::with_capacity(pilot_symbols.len());
        for &k in pilot_symbols {
            for i in 0..2 {
                let y = cma_output(&taps, &u, k, i);
                let cm = y.norm_sqr() - 1.0;
                let e = y * cm;
                for j in 0..2 {
                    for t in 0..n_taps {
                        if let Some(v) = (2 * k + centre).checked_sub(t).and_then(|idx| u[j].get(idx)) {
                            taps[i][j][t] -= step * e * v.conj();
                        }
                    }
                }
                errors.push(cm * cm);
            }
            if !errors[errors.len() - 1].is_finite() {
                return Err(Error::EqualizerDivergence(format!("non-finite output in pass {pass}")));
            }
        }
        let windows = window_means(&errors, 2 * config.cma_window);
        if let Some(&(last, last_se)) = windows.last() {
            let best = windows.iter().map(|w| w.0).fold(f64::INFINITY, f64::min);
            if last > config.cma_divergence_factor * best {
                return Err(Error::EqualizerDivergence(format!(
                    "CM error rose to {last:.3e} from {best:.3e} in pass {pass}"
                )));
            }
            residual = last;
            converged = match windows.len() {
                1 => false,
                n => {
                    let (prev, prev_se) = windows[n - 2];
                    (last - prev).abs() <= config.cma_tolerance * prev || (last - prev).abs() <= 3.0 * last_se.hypot(prev_se)
                }
            };
        } else {
            residual = errors.iter().sum::<f64>() / errors.len() as f64;
        }
        if !reinitialized && outputs_collapsed(&taps, &u, pilot_symbols) {
            // Both outputs locked to one source: restart Y orthogonal to X.
            let (xx, xy) = (taps[0][0].clone(), taps[0][1].clone());
            taps[1][0] = xy.iter().rev().map(|w| -w.conj()).collect();
            taps[1][1] = xx.iter().rev().map(|w| w.conj()).collect();
            reinitialized = true;
        }
        step /= 4.0;
    }

    let mut outputs = [
        (0..n_symbols).map(|k| cma_output(&taps, &u, k, 0)).collect::<Vec<_>>(),
        (0..n_symbols).map(|k| cma_output(&taps, &u, k, 1)).collect::<Vec<_>>(),
    ];
    // Normalise each output to unit gain for white noise at the filter input.
    for (i, out) in outputs.iter_mut().enumerate() {
        let mut g = 0.0;
        for j in 0..2 {
            for (t, a) in taps[i][j].iter().enumerate() {
                for (s, b) in taps[i][j].iter().enumerate() {
                    let lag = (t as f64 - s as f64) / 2.0;
                    g += (a * b.conj()).re * raised_cosine(lag, rolloff);
                }
            }
        }
        let norm = (g * scale * scale).sqrt();
        if !(norm > 0.0) {
            return Err(Error::EqualizerDivergence(format!("output {i} has zero gain")));
        }
        out.iter_mut().for_each(|z| *z /= norm);
    }
    Ok(CmaResult { taps, outputs, converged, residual, reinitialized, swapped: false })
}

fn outputs_collapsed(taps: &[[Vec<Complex64>; 2]; 2], u: &[Vec<Complex64>; 2], pilots: &[usize]) -> bool {
    let sample: Vec<usize> = pilots.iter().step_by((pilots.len() / 2000).max(1)).copied().collect();
    let (mut xy, mut xx, mut yy) = (ZERO, 0.0, 0.0);
    for &k in &sample {
        let a = cma_output(taps, u, k, 0);
        let b = cma_output(taps, u, k, 1);
        xy += a * b.conj();
        xx += a.norm_sqr();
        yy += b.norm_sqr();
    }
    xy.norm() > 0.5 * (xx * yy).sqrt()
}

/// Swap outputs when they correlate better with the opposite preamble root.
fn resolve_swap(outputs: &mut [Vec<Complex64>; 2], preamble: &[Vec<Complex64>; 2], segment: usize) -> bool {
    let score = |y: &[Complex64], p: &[Complex64]| -> f64 {
        y.chunks(segment)
            .zip(p.chunks(segment))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v.conj()).sum::<Complex64>().norm())
            .sum()
    };
    let straight = score(&outputs[0], &preamble[0]) + score(&outputs[1], &preamble[1]);
    let crossed = score(&outputs[0], &preamble[1]) + score(&outputs[1], &preamble[0]);
    if crossed > straight {
        outputs.swap(0, 1);
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTrack {
    /// Phase at every symbol position `0..n_symbols`.
    pub per_symbol: Vec<f64>,
    /// Phase at each pilot.
    pub at_pilots: Vec<f64>,
    pub tracking_losses: usize,
}

/// Sliding-window pilot-aided ML phase estimates, unwrapped and linearly
/// interpolated onto all symbol positions.
pub fn estimate_phase(
    received: &[Complex64],
    known: &[Complex64],
    positions: &[usize],
    n_symbols: usize,
    window: usize,
) -> Result<PhaseTrack> {
    if received.len() != known.len() || known.len() != positions.len() {
        return Err(Error::DimensionMismatch(received.len(), positions.len()));
    }
    if positions.is_empty() || window == 0 {
        return Err(Error::invalid("phase tracking needs pilots and a window ≥ 1"));
    }
    let w = window.min(positions.len());
    let products: Vec<Complex64> = received.iter().zip(known).map(|(r, a)| r * a.conj()).collect();
    let mut sum: Complex64 = products[..w].iter().sum();
    let mut pos_sum: f64 = positions[..w].iter().map(|&p| p as f64).sum();
    let mut est = Vec::with_capacity(positions.len() - w + 1);
    for start in 0..=positions.len() - w {
        if start > 0 {
            sum += products[start + w - 1] - products[start - 1];
            pos_sum += positions[start + w - 1] as f64 - positions[start - 1] as f64;
        }
        est.push((pos_sum / w as f64, sum.arg()));
    }
    let mut losses = 0;
    for k in 1..est.len() {
        let prev = est[k - 1].1;
        let mut d = est[k].1 - prev;
        d -= 2.0 * PI * (d / (2.0 * PI)).round();
        if d.abs() > PI / 2.0 {
            losses += 1;
        }
        est[k].1 = prev + d;
    }
    let interpolate = |x: f64| -> f64 {
        if x <= est[0].0 {
            return est[0].1;
        }
        let last = est[est.len() - 1];
        if x >= last.0 {
            return last.1;
        }
        let i = est.partition_point(|e| e.0 <= x);
        let (x0, y0) = est[i - 1];
        let (x1, y1) = est[i];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    };
    let per_symbol: Vec<f64> = (0..n_symbols).map(|k| interpolate(k as f64)).collect();
    let at_pilots = positions.iter().map(|&p| interpolate(p as f64)).collect();
    Ok(PhaseTrack { per_symbol, at_pilots, tracking_losses: losses })
}

/// Estimate and subtract the residual response of quantum-symbol outputs to
/// nearby (known) pilots on both polarisations.
///
/// Coefficients are correlations against the pilot sequence, which is
/// independent of the quantum symbols, shrunk towards zero by their
/// estimation variance; returns the largest magnitude.
pub fn cancel_pilot_interference(out: &mut [Vec<Complex64>; 2], reference: &PilotReference, span: usize) -> f64 {
    let layout = &reference.layout;
    let n = out[0].len();
    let mut known = [vec![ZERO; n], vec![ZERO; n]];
    for (j, k) in known.iter_mut().enumerate() {
        for (&p, a) in reference.pilot_positions.iter().zip(&reference.pilots[j]) {
            k[p] = *a;
        }
    }
    // Preamble symbols are known too but sit far from most quantum symbols.
    let quantum = &reference.quantum_positions;
    let mut largest: f64 = 0.0;
    for lag in -(span as isize)..=span as isize {
        if lag == 0 {
            continue;
        }
        let source = |k: usize| -> Option<usize> {
            let s = k as isize - lag;
            (s >= 0 && (s as usize) < n && layout.is_pilot(s as usize)).then_some(s as usize)
        };
        for i in 0..2 {
            for j in 0..2 {
                let (mut corr, mut energy, mut spread) = (ZERO, 0.0, 0.0);
                for &k in quantum {
                    if let Some(s) = source(k) {
                        let e = known[j][s].norm_sqr();
                        corr += out[i][k] * known[j][s].conj();
                        energy += e;
                        spread += out[i][k].norm_sqr() * e;
                    }
                }
                if energy == 0.0 {
                    continue;
                }
                // Positive-part shrinkage against the estimation variance, so
                // coefficients at the noise level are not subtracted as noise.
                let c = corr / energy;
                let variance = spread / (energy * energy);
                let c = c * (1.0 - variance / c.norm_sqr()).max(0.0);
                largest = largest.max(c.norm());
                for &k in quantum {
                    if let Some(s) = source(k) {
                        out[i][k] -= c * known[j][s];
                    }
                }
            }
        }
    }
    largest
}

/// Full receiver chain; on failure the diagnostics gathered so far are kept.
// The failure carries the partial report by design.
#[allow(clippy::result_large_err)]
pub fn run_dsp(
    wave: &IQWaveform,
    reference: &PilotReference,
    config: &DspConfig,
    calibration: &CalibrationRecord,
) -> std::result::Result<DspOutput, DspFailure> {
    let mut report = DspReport::default();
    match run_stages(wave, reference, config, calibration, &mut report) {
        Ok(frame) => Ok(DspOutput { frame, report }),
        Err(error) => Err(DspFailure { error, report }),
    }
}

fn run_stages(
    wave: &IQWaveform,
    reference: &PilotReference,
    config: &DspConfig,
    calibration: &CalibrationRecord,
    report: &mut DspReport,
) -> Result<SymbolFrame> {
    config.validate()?;
    if !(calibration.snu_scale > 0.0) {
        return Err(Error::Calibration(format!("SNU scale {} must be positive", calibration.snu_scale)));
    }
    let layout = &reference.layout;
    let n_symbols = layout.frame_length;
    let (num, den) = samples_per_symbol_ratio(wave.sample_rate, config.symbol_rate)?;
    let sps = num as f64 / den as f64;
    let gain = calibration.snu_scale.sqrt();
    let sync = {
        // The search only reads the preamble and the lag window after it.
        let extent = ((config.sync_search_symbols + reference.preamble[0].len() + 2 * config.filter_span) as f64 * sps)
            .ceil() as usize
            + 8;
        let prefix = |x: &[Complex64]| downconvert(&x[..extent.min(x.len())], wave.center_frequency, wave.sample_rate, gain);
        let baseband = [prefix(&wave.x), prefix(&wave.y)];
        report.stages.push(DspStage::MatchedFilter);
        synchronize(&baseband, reference, config, wave.sample_rate)?
    };
    report.sync_psr = sync.psr;
    report.timing_offset = sync.symbol_time - wave.symbol_origin;
    report.stages.push(DspStage::Synchronization);

    // Remove the coarse offset before filtering so the filter stays matched.
    let baseband = [
        downconvert(&wave.x, wave.center_frequency + sync.cfo_hz, wave.sample_rate, gain),
        downconvert(&wave.y, wave.center_frequency + sync.cfo_hz, wave.sample_rate, gain),
    ];
    report.cfo_coarse_hz = sync.cfo_hz;
    report.cfo_estimate_hz = sync.cfo_hz;
    let mf = MatchedFilter::new(config.rolloff, sps, config.filter_span);
    let mut u = [
        mf.sample_grid(&baseband[0], sync.symbol_time, num, 2 * den, 2 * n_symbols),
        mf.sample_grid(&baseband[1], sync.symbol_time, num, 2 * den, 2 * n_symbols),
    ];
    drop(baseband);
    report.stages.push(DspStage::CoarseCfo);

    let positions = &reference.pilot_positions;
    if config.cfo_before_cma {
        let pilots: Vec<Vec<Complex64>> = (0..2).map(|i| positions.iter().map(|&p| u[i][2 * p]).collect()).collect();
        let pairs: Vec<(&[Complex64], &[Complex64])> = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| (pilots[i].as_slice(), reference.pilots[j].as_slice()))
            .collect();
        let cfo = estimate_cfo(&pairs, positions, config.symbol_rate, config)?;
        u.iter_mut().for_each(|x| derotate(x, cfo.hz, config.symbol_rate, 0.5));
        report.cfo_estimate_hz += cfo.hz;
        report.cfo_peak_db = cfo.peak_db;
    }

    // A 2048-pilot fit spans a few µs, short against residual CFO and phase drift.
    let initial = if config.cma_pilot_init { pilot_jones_init(&u, positions, &reference.pilots, 2048) } else { None };
    let mut cma = cma_equalize_from(&u, positions, n_symbols, config.rolloff, config, initial)?;
    drop(u);
    cma.swapped = resolve_swap(&mut cma.outputs, &reference.preamble, config.sync_segment);
    report.cma_converged = cma.converged;
    report.cma_residual = cma.residual;
    report.cma_reinitialized = cma.reinitialized;
    report.pol_swapped = cma.swapped;
    if !cma.converged {
        report.warnings.push(format!("CMA not converged (residual {:.3e})", cma.residual));
    }
    report.stages.push(DspStage::Equalization);

    let mut out = cma.outputs;
    let pilots_of = |out: &[Vec<Complex64>; 2], i: usize| -> Vec<Complex64> { positions.iter().map(|&p| out[i][p]).collect() };
    let fine = {
        let (px, py) = (pilots_of(&out, 0), pilots_of(&out, 1));
        let pairs = [(px.as_slice(), reference.pilots[0].as_slice()), (py.as_slice(), reference.pilots[1].as_slice())];
        estimate_cfo(&pairs, positions, config.symbol_rate, config)?
    };
    out.iter_mut().for_each(|x| derotate(x, fine.hz, config.symbol_rate, 1.0));
    report.cfo_estimate_hz += fine.hz;
    if !config.cfo_before_cma {
        report.cfo_peak_db = fine.peak_db;
    }
    report.stages.push(DspStage::FineCfo);

    let v_a = (reference.amplitude / 10f64.powf(layout.pilot_gain_db / 20.0)).powi(2);
    for i in 0..2 {
        let received = pilots_of(&out, i);
        let track = estimate_phase(&received, &reference.pilots[i], positions, n_symbols, config.phase_pilot_window)?;
        out[i].iter_mut().zip(&track.per_symbol).for_each(|(z, th)| *z *= Complex64::from_polar(1.0, -th));
        report.tracking_losses += track.tracking_losses;
        report.phase_track[i] = track.at_pilots;

        let (mut corr, mut energy) = (0.0, 0.0);
        for (&p, a) in positions.iter().zip(&reference.pilots[i]) {
            corr += (out[i][p] * a.conj()).re;
            energy += a.norm_sqr();
        }
        let g = corr / energy;
        let noise = positions
            .iter()
            .zip(&reference.pilots[i])
            .map(|(&p, a)| (out[i][p] - a * g).norm_sqr())
            .sum::<f64>()
            / (2 * positions.len()) as f64;
        report.pilot_gain[i] = g;
        report.snr_estimate_db[i] = 10.0 * (g * g * v_a / 2.0 / noise).log10();
    }
    if report.tracking_losses > 0 {
        report.warnings.push(format!("{} phase tracking losses", report.tracking_losses));
    }
    report.stages.push(DspStage::PhaseTracking);

    if config.pilot_cancellation_span > 0 {
        let leakage = cancel_pilot_interference(&mut out, reference, config.pilot_cancellation_span);
        report.max_pilot_leakage = leakage / report.pilot_gain[0].abs().max(report.pilot_gain[1].abs());
        report.stages.push(DspStage::PilotCancellation);
    }

    let [x, y] = out;
    Ok(SymbolFrame {
        layout: layout.clone(),
        x,
        y,
        pilot_mask: (0..n_symbols).map(|k| layout.is_pilot(k)).collect(),
        preamble: layout.preamble(),
        pilot_amplitude: reference.amplitude,
        pilot_seed: reference.pilot_seed,
    })
}
