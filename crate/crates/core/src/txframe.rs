//! Transmit frame assembly and waveform generation.
//!
//! A frame is a Zadoff-Chu preamble (different roots on X and Y) followed by
//! a periodic interleave of public QPSK pilots and shaped quantum symbols.
//! The waveform is shaped by an RRC filter at an integer oversampling rate,
//! decimated to the output rate, and digitally upconverted.

use std::io::{BufRead, Write};
use std::ops::Range;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constellation::SymbolBlock;
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub pilot_fraction: f64,
    pub pilot_gain_db: f64,
    pub cazac_length: usize,
    /// Zadoff-Chu roots for the X and Y preambles.
    pub cazac_roots: [usize; 2],
    /// Symbols per pilot/quantum unit; the first `pilot_fraction·period`
    /// symbols of each unit are pilots.
    pub interleave_period: usize,
    /// Total symbols including the preamble.
    pub frame_length: usize,
}

impl Default for FrameLayout {
    fn default() -> Self {
        FrameLayout {
            pilot_fraction: 0.5,
            pilot_gain_db: 13.0,
            cazac_length: 1021,
            cazac_roots: [7, 11],
            interleave_period: 2,
            frame_length: 1021,
        }
    }
}

impl FrameLayout {
    /// Default layout sized for `n_quantum` quantum symbols per polarisation.
    pub fn for_quantum(n_quantum: usize) -> Result<FrameLayout> {
        FrameLayout::default().with_quantum(n_quantum)
    }

    /// Same structure, resized for `n_quantum` quantum symbols.
    pub fn with_quantum(&self, n_quantum: usize) -> Result<FrameLayout> {
        let per_unit = self.quantum_per_period()?;
        if !n_quantum.is_multiple_of(per_unit) {
            return Err(Error::invalid(format!(
                "{n_quantum} quantum symbols is not a multiple of {per_unit} per interleave period"
            )));
        }
        let units = n_quantum / per_unit;
        Ok(FrameLayout { frame_length: self.cazac_length + units * self.interleave_period, ..self.clone() })
    }

    fn pilots_per_period(&self) -> Result<usize> {
        let p = (self.pilot_fraction * self.interleave_period as f64).round() as usize;
        if !(self.pilot_fraction > 0.0 && self.pilot_fraction < 1.0) || p == 0 || p >= self.interleave_period {
            return Err(Error::invalid(format!(
                "pilot fraction {} does not give 1..period-1 pilots per period {}",
                self.pilot_fraction, self.interleave_period
            )));
        }
        Ok(p)
    }

    fn quantum_per_period(&self) -> Result<usize> {
        Ok(self.interleave_period - self.pilots_per_period()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.pilots_per_period()?;
        if self.cazac_length < 16 {
            return Err(Error::invalid("CAZAC length must be ≥ 16"));
        }
        if self.cazac_roots[0] == self.cazac_roots[1] {
            return Err(Error::invalid("X and Y preambles need distinct roots"));
        }
        for &root in &self.cazac_roots {
            if gcd(root, self.cazac_length) != 1 {
                return Err(Error::invalid(format!("root {root} not coprime with {}", self.cazac_length)));
            }
        }
        if self.frame_length < self.cazac_length || !(self.frame_length - self.cazac_length).is_multiple_of(self.interleave_period)
        {
            return Err(Error::invalid("frame length must be preamble + whole interleave periods"));
        }
        Ok(())
    }

    pub fn preamble(&self) -> Range<usize> {
        0..self.cazac_length
    }

    pub fn is_pilot(&self, position: usize) -> bool {
        position >= self.cazac_length
            && position < self.frame_length
            && (position - self.cazac_length) % self.interleave_period
                < self.pilots_per_period().expect("validated layout")
    }

    pub fn pilot_positions(&self) -> Vec<usize> {
        (self.cazac_length..self.frame_length).filter(|&p| self.is_pilot(p)).collect()
    }

    pub fn quantum_positions(&self) -> Vec<usize> {
        (self.cazac_length..self.frame_length).filter(|&p| !self.is_pilot(p)).collect()
    }

    pub fn n_quantum(&self) -> usize {
        let units = (self.frame_length - self.cazac_length) / self.interleave_period;
        units * self.quantum_per_period().expect("validated layout")
    }

    pub fn n_pilots(&self) -> usize {
        self.frame_length - self.cazac_length - self.n_quantum()
    }

    /// Pilot amplitude for a quantum RMS amplitude of `√V_A`.
    pub fn pilot_amplitude(&self, v_a: f64) -> f64 {
        v_a.sqrt() * 10f64.powf(self.pilot_gain_db / 20.0)
    }

    /// Short SHA-256 digest of the layout, for provenance.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("layout serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zadoff-Chu sequence `z_k = exp(−iπ·u·k(k + c)/L)` with `c = L mod 2`.
pub fn cazac_sequence(length: usize, root: usize) -> Result<Vec<Complex64>> {
    if length < 16 {
        return Err(Error::invalid(format!("CAZAC length {length} must be ≥ 16")));
    }
    if root == 0 || gcd(root, length) != 1 {
        return Err(Error::invalid(format!("root {root} is not coprime with length {length}")));
    }
    let c = (length % 2) as u128;
    let (l, u) = (length as u128, root as u128);
    Ok((0..length as u128)
        .map(|k| {
            // Reduce the phase index exactly modulo 2L before converting.
            let idx = (u * k * (k + c)) % (2 * l);
            Complex64::from_polar(1.0, -std::f64::consts::PI * idx as f64 / length as f64)
        })
        .collect())
}

/// Public symbols known to both ends: preambles and pilot sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotReference {
    pub layout: FrameLayout,
    pub pilot_seed: u64,
    pub amplitude: f64,
    pub preamble: [Vec<Complex64>; 2],
    /// Pilot values in frame order, per polarisation.
    pub pilots: [Vec<Complex64>; 2],
    pub pilot_positions: Vec<usize>,
    pub quantum_positions: Vec<usize>,
}

/// Reconstruct the public reference from the layout, pilot seed and nominal `V_A`.
pub fn pilot_reference(layout: &FrameLayout, pilot_seed: u64, v_a: f64) -> Result<PilotReference> {
    layout.validate()?;
    if !(v_a > 0.0) {
        return Err(Error::invalid(format!("V_A = {v_a} must be positive")));
    }
    let amplitude = layout.pilot_amplitude(v_a);
    let preamble = [
        scaled(cazac_sequence(layout.cazac_length, layout.cazac_roots[0])?, amplitude),
        scaled(cazac_sequence(layout.cazac_length, layout.cazac_roots[1])?, amplitude),
    ];
    let pilot_positions = layout.pilot_positions();
    let base = rng::stream(pilot_seed, Stream::Pilots);
    let qpsk = |pol: u64| -> Vec<Complex64> {
        let mut r = rng::rng(rng::split(base, pol));
        (0..pilot_positions.len())
            .map(|_| {
                let k: u32 = r.random_range(0..4);
                let phase = std::f64::consts::FRAC_PI_4 + std::f64::consts::FRAC_PI_2 * k as f64;
                Complex64::from_polar(amplitude, phase)
            })
            .collect()
    };
    Ok(PilotReference {
        layout: layout.clone(),
        pilot_seed,
        amplitude,
        preamble,
        pilots: [qpsk(0), qpsk(1)],
        quantum_positions: layout.quantum_positions(),
        pilot_positions,
    })
}

fn scaled(v: Vec<Complex64>, a: f64) -> Vec<Complex64> {
    v.into_iter().map(|z| z * a).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolFrame {
    pub layout: FrameLayout,
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
    pub pilot_mask: Vec<bool>,
    pub preamble: Range<usize>,
    pub pilot_amplitude: f64,
    pub pilot_seed: u64,
}

impl SymbolFrame {
    pub fn pol(&self, pol: usize) -> &[Complex64] {
        if pol == 0 {
            &self.x
        } else {
            &self.y
        }
    }

    pub fn quantum_symbols(&self, pol: usize) -> Vec<Complex64> {
        self.select(pol, false)
    }

    pub fn pilot_symbols(&self, pol: usize) -> Vec<Complex64> {
        self.select(pol, true)
    }

    fn select(&self, pol: usize, pilots: bool) -> Vec<Complex64> {
        self.pol(pol)
            .iter()
            .zip(&self.pilot_mask)
            .enumerate()
            .filter(|(i, (_, &m))| !self.preamble.contains(i) && m == pilots)
            .map(|(_, (&z, _))| z)
            .collect()
    }
}

pub fn build_frame(quantum: &SymbolBlock, layout: &FrameLayout, pilot_seed: u64) -> Result<SymbolFrame> {
    layout.validate()?;
    if quantum.len() != layout.n_quantum() || quantum.symbols_y.len() != quantum.len() {
        return Err(Error::DimensionMismatch(quantum.len(), layout.n_quantum()));
    }
    let reference = pilot_reference(layout, pilot_seed, quantum.modulation_variance)?;
    let n = layout.frame_length;
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let mut y = x.clone();
    let mut pilot_mask = vec![false; n];
    x[..layout.cazac_length].copy_from_slice(&reference.preamble[0]);
    y[..layout.cazac_length].copy_from_slice(&reference.preamble[1]);
    for (k, &p) in reference.pilot_positions.iter().enumerate() {
        x[p] = reference.pilots[0][k];
        y[p] = reference.pilots[1][k];
        pilot_mask[p] = true;
    }
    for (k, &q) in reference.quantum_positions.iter().enumerate() {
        x[q] = quantum.symbols_x[k];
        y[q] = quantum.symbols_y[k];
    }
    Ok(SymbolFrame {
        layout: layout.clone(),
        x,
        y,
        pilot_mask,
        preamble: layout.preamble(),
        pilot_amplitude: reference.amplitude,
        pilot_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseShape {
    pub rolloff: f64,
    /// One-sided filter extent: taps cover ±`span_symbols` symbols.
    pub span_symbols: usize,
    /// Output samples per symbol as the ratio `sps_num / sps_den`; shaping
    /// runs at `sps_num` samples per symbol and decimates by `sps_den`.
    pub sps_num: usize,
    pub sps_den: usize,
}

impl Default for PulseShape {
    fn default() -> Self {
        PulseShape { rolloff: 1.0, span_symbols: 32, sps_num: 25, sps_den: 2 }
    }
}

impl PulseShape {
    pub fn samples_per_symbol(&self) -> f64 {
        self.sps_num as f64 / self.sps_den as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rolloff) {
            return Err(Error::invalid(format!("roll-off {} outside [0, 1]", self.rolloff)));
        }
        if self.span_symbols < 8 {
            return Err(Error::invalid("filter span must be ≥ 8 symbols"));
        }
        if self.sps_num == 0 || self.sps_den == 0 || self.sps_num < 2 * self.sps_den {
            return Err(Error::invalid("need at least 2 output samples per symbol"));
        }
        Ok(())
    }
}

/// Root-raised-cosine impulse response at `t` symbol periods (unnormalised,
/// peak `1 − γ + 4γ/π`).
pub fn rrc_value(t: f64, rolloff: f64) -> f64 {
    use std::f64::consts::{PI, SQRT_2};
    let g = rolloff;
    if t.abs() < 1e-12 {
        return 1.0 - g + 4.0 * g / PI;
    }
    if g > 0.0 && ((4.0 * g * t).abs() - 1.0).abs() < 1e-9 {
        let a = PI / (4.0 * g);
        return g / SQRT_2 * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let x = PI * t;
    ((x * (1.0 - g)).sin() + 4.0 * g * t * (x * (1.0 + g)).cos()) / (x * (1.0 - (4.0 * g * t).powi(2)))
}

/// Raised-cosine pulse (the RRC autocorrelation) at `t` symbol periods.
pub fn raised_cosine(t: f64, rolloff: f64) -> f64 {
    use std::f64::consts::PI;
    let sinc = if t.abs() < 1e-12 { 1.0 } else { (PI * t).sin() / (PI * t) };
    let d = 1.0 - (2.0 * rolloff * t).powi(2);
    if d.abs() < 1e-9 {
        return PI / 4.0 * sinc;
    }
    sinc * (PI * rolloff * t).cos() / d
}

/// Unit-energy RRC taps at `sps_num` samples per symbol.
pub fn rrc_taps(shape: &PulseShape) -> Result<Vec<f64>> {
    shape.validate()?;
    let sps = shape.sps_num;
    let len = 2 * shape.span_symbols * sps + 1;
    let centre = (len - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..len).map(|n| rrc_value((n as f64 - centre) / sps as f64, shape.rolloff)).collect();
    let norm = taps.iter().map(|h| h * h).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|h| *h /= norm);
    Ok(taps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IQWaveform {
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
    pub sample_rate: f64,
    pub symbol_rate: f64,
    pub center_frequency: f64,
    /// Sample time of the first frame symbol's pulse peak.
    pub symbol_origin: f64,
    pub layout_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct WaveformHeader {
    sample_rate: f64,
    symbol_rate: f64,
    center_frequency: f64,
    symbol_origin: f64,
    layout_digest: String,
    samples: usize,
}

impl IQWaveform {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn samples_per_symbol(&self) -> f64 {
        self.sample_rate / self.symbol_rate
    }

    pub fn pol(&self, pol: usize) -> &[Complex64] {
        if pol == 0 {
            &self.x
        } else {
            &self.y
        }
    }

    /// One JSON header line, then little-endian f64 `Ix, Qx, Iy, Qy` per sample.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let header = WaveformHeader {
            sample_rate: self.sample_rate,
            symbol_rate: self.symbol_rate,
            center_frequency: self.center_frequency,
            symbol_origin: self.symbol_origin,
            layout_digest: self.layout_digest.clone(),
            samples: self.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(32 * self.len());
        for (a, b) in self.x.iter().zip(&self.y) {
            for v in [a.re, a.im, b.re, b.im] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: BufRead>(mut input: R) -> Result<IQWaveform> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let header: WaveformHeader = serde_json::from_str(line.trim_end())?;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != 32 * header.samples {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                32 * header.samples,
                bytes.len()
            )));
        }
        let mut x = Vec::with_capacity(header.samples);
        let mut y = Vec::with_capacity(header.samples);
        for chunk in bytes.chunks_exact(32) {
            let v = |i: usize| f64::from_le_bytes(chunk[8 * i..8 * i + 8].try_into().expect("8 bytes"));
            x.push(Complex64::new(v(0), v(1)));
            y.push(Complex64::new(v(2), v(3)));
        }
        Ok(IQWaveform {
            x,
            y,
            sample_rate: header.sample_rate,
            symbol_rate: header.symbol_rate,
            center_frequency: header.center_frequency,
            symbol_origin: header.symbol_origin,
            layout_digest: header.layout_digest,
        })
    }
}

/// Nominal occupied band `f_c ± (1 + γ)·R/2` in Hz.
pub fn occupied_band(rolloff: f64, symbol_rate: f64, center_frequency: f64) -> (f64, f64) {
    let half = (1.0 + rolloff) * symbol_rate / 2.0;
    (center_frequency - half, center_frequency + half)
}

/// Unit phasors `exp(iωn)` for n = 0, 1, …, by recurrence with periodic
/// exact resynchronisation.
pub fn oscillator(omega: f64) -> impl Iterator<Item = Complex64> {
    let step = Complex64::from_polar(1.0, omega);
    let mut z = Complex64::new(1.0, 0.0);
    (0u64..).map(move |n| {
        if n % 512 == 0 {
            z = Complex64::from_polar(1.0, omega * n as f64);
        }
        let out = z;
        z *= step;
        out
    })
}

/// Dot product with independent partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Pulse-shape the frame and shift it to `center_frequency`.
pub fn shape_and_upconvert(
    frame: &SymbolFrame,
    shape: &PulseShape,
    symbol_rate: f64,
    center_frequency: f64,
) -> Result<IQWaveform> {
    shape.validate()?;
    let sample_rate = symbol_rate * shape.samples_per_symbol();
    let occupied = (1.0 + shape.rolloff) * symbol_rate;
    let required = occupied + 2.0 * (center_frequency - occupied / 2.0).abs();
    if sample_rate < required * (1.0 - 1e-12) {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate:.4e} Hz aliases: need ≥ {required:.4e} Hz"
        )));
    }
    let taps = rrc_taps(shape)?;
    let (up, down) = (shape.sps_num, shape.sps_den);
    let gain = (down as f64).sqrt();
    let fine_len = up * (frame.x.len() - 1) + taps.len();
    let out_len = fine_len.div_ceil(down);
    let omega = 2.0 * std::f64::consts::PI * center_frequency / sample_rate;
    // Polyphase branches, reversed so they line up with ascending symbols:
    // branch r holds taps[r + up·m] at index len_r − 1 − m.
    let branches: Vec<Vec<f64>> = (0..up)
        .map(|r| {
            let mut b: Vec<f64> = taps.iter().skip(r).step_by(up).map(|h| h * gain).collect();
            b.reverse();
            b
        })
        .collect();
    let shape_pol = |symbols: &[Complex64]| -> Vec<Complex64> {
        let re: Vec<f64> = symbols.iter().map(|z| z.re).collect();
        let im: Vec<f64> = symbols.iter().map(|z| z.im).collect();
        let mut out = vec![Complex64::new(0.0, 0.0); out_len];
        for ((n, o), lo) in out.iter_mut().enumerate().zip(oscillator(omega)) {
            let i = n * down;
            let branch = &branches[i % up];
            // Symbol j_hi − m pairs with taps[r + up·m].
            let j_hi = i / up;
            let m_lo = (j_hi + 1).saturating_sub(symbols.len());
            let m_hi = branch.len().min(j_hi + 1);
            if m_lo >= m_hi {
                continue;
            }
            let (s_lo, s_hi) = (j_hi + 1 - m_hi, j_hi + 1 - m_lo);
            let h = &branch[branch.len() - m_hi..branch.len() - m_lo];
            *o = Complex64::new(dot(&re[s_lo..s_hi], h), dot(&im[s_lo..s_hi], h)) * lo;
        }
        out
    };
    Ok(IQWaveform {
        x: shape_pol(&frame.x),
        y: shape_pol(&frame.y),
        sample_rate,
        symbol_rate,
        center_frequency,
        symbol_origin: (taps.len() - 1) as f64 / 2.0 / down as f64,
        layout_digest: frame.layout.digest(),
    })
}
