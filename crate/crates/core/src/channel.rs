//! Fiber link, lasers and coherent receiver front-end, in shot-noise units,
//! plus the shot/electrical noise calibration.
//!
//! All Gaussian noises are added at the receiver, per sample, with
//! per-quadrature variance `1 + V_el + ξ_B` (SNU). Since the receiver's
//! matched filter has unit energy, the same variances appear on the
//! symbol-rate samples. Raw receiver units are SNU amplitudes times
//! `receiver_gain`.

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::constellation::SymbolBlock;
use crate::rng::{self, SimRng, Stream};
use crate::txframe::IQWaveform;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub distance_km: f64,
    pub loss_db_per_km: f64,
    /// Overrides `distance_km · loss_db_per_km` when set.
    pub loss_db_total: Option<f64>,
    pub eta: f64,
    pub v_el: f64,
    /// Excess noise injected at Bob (SNU).
    pub xi_b: f64,
    pub linewidth_tx: f64,
    pub linewidth_lo: f64,
    pub cfo_hz: f64,
    /// Jones matrix `[[cos θ, −sin θ·e^{−iφ}], [sin θ·e^{iφ}, cos θ]]`.
    pub pol_angle: f64,
    pub pol_phase: f64,
    /// Two-pole low-frequency noise at DC of the receiver band (SNU per
    /// quadrature); not present during calibration.
    pub lf_noise_power: f64,
    pub lf_corner_hz: f64,
    /// Propagation delay in samples (fractional part applied by band-limited
    /// interpolation).
    pub delay_samples: f64,
    pub receiver_gain: f64,
    /// Vacuum noise on/off; off only for idealised tests.
    pub shot_noise: bool,
    pub seed: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            distance_km: 9.5,
            loss_db_per_km: 2.2 / 9.5,
            loss_db_total: None,
            eta: 0.6,
            v_el: 0.1,
            xi_b: 0.0,
            linewidth_tx: 10e3,
            linewidth_lo: 10e3,
            cfo_hz: 0.0,
            pol_angle: 0.0,
            pol_phase: 0.0,
            lf_noise_power: 0.0,
            lf_corner_hz: 1e6,
            delay_samples: 0.0,
            receiver_gain: 1.0,
            shot_noise: true,
            seed: 0,
        }
    }
}

impl ChannelParams {
    /// Noise-free identity link (unit transmittance and efficiency).
    pub fn ideal() -> Self {
        ChannelParams {
            distance_km: 0.0,
            eta: 1.0,
            v_el: 0.0,
            linewidth_tx: 0.0,
            linewidth_lo: 0.0,
            shot_noise: false,
            ..ChannelParams::default()
        }
    }

    pub fn transmittance(&self) -> Result<f64> {
        match self.loss_db_total {
            Some(db) if db >= 0.0 => Ok(10f64.powf(-db / 10.0)),
            Some(db) => Err(Error::invalid(format!("total loss {db} dB must be ≥ 0"))),
            None => transmittance_from_distance(self.distance_km, self.loss_db_per_km),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transmittance()?;
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::invalid(format!("η = {} must lie in (0, 1]", self.eta)));
        }
        let non_negative = [
            ("V_el", self.v_el),
            ("ξ_B", self.xi_b),
            ("tx linewidth", self.linewidth_tx),
            ("LO linewidth", self.linewidth_lo),
            ("LF noise power", self.lf_noise_power),
            ("delay", self.delay_samples),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} = {v} must be finite and ≥ 0")));
            }
        }
        if !(self.receiver_gain > 0.0) || !(self.lf_corner_hz > 0.0) {
            return Err(Error::invalid("receiver gain and LF corner must be positive"));
        }
        Ok(())
    }

    pub fn jones(&self) -> [[Complex64; 2]; 2] {
        let (c, s) = (self.pol_angle.cos(), self.pol_angle.sin());
        let e = Complex64::from_polar(1.0, self.pol_phase);
        [[Complex64::new(c, 0.0), -s * e.conj()], [s * e, Complex64::new(c, 0.0)]]
    }

    /// Per-quadrature white noise variance at Bob (SNU).
    pub fn noise_variance(&self) -> f64 {
        f64::from(u8::from(self.shot_noise)) + self.v_el + self.xi_b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    /// Per-quadrature variances in receiver units.
    pub shot_noise_variance_raw: f64,
    pub electrical_noise_variance_raw: f64,
    pub snu_scale: f64,
    /// Complex samples per polarisation in each acquisition.
    pub samples: usize,
    pub block_id: u64,
}

impl CalibrationRecord {
    /// Calibration for a known receiver gain with no sampling error.
    pub fn exact(params: &ChannelParams) -> CalibrationRecord {
        let g2 = params.receiver_gain * params.receiver_gain;
        CalibrationRecord {
            shot_noise_variance_raw: g2 * (1.0 + params.v_el),
            electrical_noise_variance_raw: g2 * params.v_el,
            snu_scale: 1.0 / g2,
            samples: 0,
            block_id: 0,
        }
    }

    /// Electrical noise in SNU.
    pub fn v_el(&self) -> f64 {
        self.electrical_noise_variance_raw * self.snu_scale
    }

    /// Standard error of a per-quadrature variance estimate `v` from this record.
    pub fn variance_std_err(&self, v: f64) -> f64 {
        // 4·samples real values (2 quadratures × 2 polarisations).
        v * (2.0 / (4.0 * self.samples as f64)).sqrt()
    }

    /// Standard error of `snu_scale`.
    pub fn snu_scale_std_err(&self) -> f64 {
        let d = self.shot_noise_variance_raw - self.electrical_noise_variance_raw;
        let se = self
            .variance_std_err(self.shot_noise_variance_raw)
            .hypot(self.variance_std_err(self.electrical_noise_variance_raw));
        se / (d * d)
    }
}

/// `T = 10^(−distance·loss/10)`.
pub fn transmittance_from_distance(distance_km: f64, loss_db_per_km: f64) -> Result<f64> {
    if !(distance_km >= 0.0) || !(loss_db_per_km >= 0.0) {
        return Err(Error::invalid(format!(
            "distance {distance_km} km and loss {loss_db_per_km} dB/km must be ≥ 0"
        )));
    }
    Ok(10f64.powf(-distance_km * loss_db_per_km / 10.0))
}

fn gaussian(rng: &mut SimRng, sigma: f64) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * sigma
}

/// Delay `signal` by `delay` samples: integer part by prepending zeros,
/// fractional part by a linear phase in the frequency domain.
pub fn delay_signal(signal: &[Complex64], delay: f64) -> Vec<Complex64> {
    let whole = delay.floor() as usize;
    let mut out = Vec::with_capacity(delayed_capacity(whole + signal.len(), delay));
    out.resize(whole, Complex64::new(0.0, 0.0));
    out.extend_from_slice(signal);
    apply_fractional_delay(&mut out, delay - whole as f64);
    out
}

/// FFT length for a fractional delay of a `len`-sample signal; `len` if none.
fn delayed_capacity(len: usize, delay: f64) -> usize {
    if delay.fract() > 0.0 {
        // Guard band against circular wrap of the interpolation tails.
        (len + 1 + 4096).next_power_of_two()
    } else {
        len
    }
}

/// Delay in place by `frac` ∈ [0, 1) samples; the signal grows by one sample.
fn apply_fractional_delay(out: &mut Vec<Complex64>, frac: f64) {
    if !(frac > 0.0) {
        return;
    }
    out.push(Complex64::new(0.0, 0.0));
    let len = out.len();
    let n = delayed_capacity(len - 1, frac);
    out.resize(n, Complex64::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(out);
    for (k, z) in out.iter_mut().enumerate() {
        let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } / n as f64;
        *z *= Complex64::from_polar(1.0 / n as f64, -2.0 * std::f64::consts::PI * f * frac);
    }
    planner.plan_fft_inverse(n).process(out);
    out.truncate(len);
    out.shrink_to_fit();
}

/// Propagate a transmitted waveform to raw receiver samples.
pub fn propagate(wave: &IQWaveform, params: &ChannelParams) -> Result<IQWaveform> {
    params.validate()?;
    let amplitude = (params.eta * params.transmittance()?).sqrt();
    let jones = params.jones();
    let fs = wave.sample_rate;
    let base = rng::stream(params.seed, Stream::Channel);

    let mut phase_rng = rng::rng(rng::split(base, 0));
    let phase_sigma = (2.0 * std::f64::consts::PI * (params.linewidth_tx + params.linewidth_lo) / fs).sqrt();
    let cfo_step = 2.0 * std::f64::consts::PI * params.cfo_hz / fs;
    let mut phase = 0.0f64;
    // Samples are written after the integer delay, into buffers sized for the
    // fractional-delay FFT, so no full-length copy is made.
    let whole = params.delay_samples.floor() as usize;
    let capacity = delayed_capacity(whole + wave.len(), params.delay_samples);
    let mut x = Vec::with_capacity(capacity);
    let mut y = Vec::with_capacity(capacity);
    x.resize(whole, Complex64::new(0.0, 0.0));
    y.resize(whole, Complex64::new(0.0, 0.0));
    for (n, (a, b)) in wave.x.iter().zip(&wave.y).enumerate() {
        let (a, b) = (a * amplitude, b * amplitude);
        let rot = Complex64::from_polar(1.0, phase + cfo_step * n as f64);
        x.push((jones[0][0] * a + jones[0][1] * b) * rot);
        y.push((jones[1][0] * a + jones[1][1] * b) * rot);
        if phase_sigma > 0.0 {
            let w: f64 = StandardNormal.sample(&mut phase_rng);
            phase += phase_sigma * w;
        }
    }

    let frac = params.delay_samples - whole as f64;
    apply_fractional_delay(&mut x, frac);
    apply_fractional_delay(&mut y, frac);
    let mut out = [x, y];
    let sigma = params.noise_variance().sqrt();
    // Two cascaded one-pole sections: the 1/f⁴ tail keeps the noise near DC.
    let lf_a = (-2.0 * std::f64::consts::PI * params.lf_corner_hz / fs).exp();
    let a2 = lf_a * lf_a;
    let lf_sigma = (params.lf_noise_power * (1.0 - a2).powi(3) / (1.0 + a2)).sqrt();
    let lf_on = params.lf_noise_power > 0.0;
    for (pol, samples) in out.iter_mut().enumerate() {
        let mut noise_rng = rng::rng(rng::split(base, 1 + pol as u64));
        let mut lf_rng = rng::rng(rng::split(base, 3 + pol as u64));
        let (mut stage, mut lf) = if lf_on {
            (gaussian(&mut lf_rng, lf_sigma / (1.0 - a2).sqrt()), gaussian(&mut lf_rng, params.lf_noise_power.sqrt()))
        } else {
            (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0))
        };
        for z in samples.iter_mut() {
            if sigma > 0.0 {
                *z += gaussian(&mut noise_rng, sigma);
            }
            if lf_on {
                *z += lf;
                stage = stage * lf_a + gaussian(&mut lf_rng, lf_sigma);
                lf = lf * lf_a + stage;
            }
            *z *= params.receiver_gain;
        }
    }
    let [x, y] = out;
    Ok(IQWaveform {
        x,
        y,
        sample_rate: wave.sample_rate,
        symbol_rate: wave.symbol_rate,
        center_frequency: wave.center_frequency,
        symbol_origin: wave.symbol_origin,
        layout_digest: wave.layout_digest.clone(),
    })
}

/// Signal-off (shot + electrical) and LO-off (electrical) acquisitions.
pub fn calibrate(params: &ChannelParams, duration_samples: usize, seed: u64) -> Result<CalibrationRecord> {
    params.validate()?;
    if duration_samples < 100_000 {
        return Err(Error::invalid(format!("calibration needs ≥ 1e5 samples, got {duration_samples}")));
    }
    let base = rng::stream(seed, Stream::Calibration);
    let g = params.receiver_gain;
    let shot = if params.shot_noise { 1.0 } else { 0.0 };
    let measure = |index: u64, variance: f64| -> f64 {
        if variance == 0.0 {
            return 0.0;
        }
        let mut r = rng::rng(rng::split(base, index));
        let sigma = variance.sqrt() * g;
        let total: f64 = (0..2 * duration_samples).map(|_| gaussian(&mut r, sigma).norm_sqr()).sum();
        total / (4 * duration_samples) as f64
    };
    let shot_raw = measure(0, shot + params.v_el);
    let elec_raw = measure(1, params.v_el);
    let diff = shot_raw - elec_raw;
    if !(diff > 0.0) {
        return Err(Error::Calibration(format!(
            "shot-noise variance {shot_raw:e} not above electrical {elec_raw:e}"
        )));
    }
    Ok(CalibrationRecord {
        shot_noise_variance_raw: shot_raw,
        electrical_noise_variance_raw: elec_raw,
        snu_scale: 1.0 / diff,
        samples: duration_samples,
        block_id: seed,
    })
}

/// Symbol-level link: what the DSP delivers when it compensates every
/// impairment perfectly. Returns SNU-normalised received quantum symbols.
pub fn propagate_symbols(block: &SymbolBlock, params: &ChannelParams) -> Result<[Vec<Complex64>; 2]> {
    params.validate()?;
    let amplitude = (params.eta * params.transmittance()?).sqrt();
    let sigma = params.noise_variance().sqrt();
    let base = rng::stream(params.seed, Stream::Channel);
    let pol = |symbols: &[Complex64], index: u64| -> Vec<Complex64> {
        let mut r = rng::rng(rng::split(base, 10 + index));
        symbols.iter().map(|s| s * amplitude + gaussian(&mut r, sigma)).collect()
    };
    Ok([pol(&block.symbols_x, 0), pol(&block.symbols_y, 1)])
}
