//! Flat `key = value` experiment configuration.
//!
//! Every tunable of every stage is a namespaced key (`channel.eta`,
//! `dsp.cma_taps`, ...). Unknown keys are rejected, and the resolved key set
//! is echoed, with its SHA-256, into every output artifact.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelParams;
use crate::keyrate::{DetectorModel, SecurityParams, SweepBase};
use crate::rxdsp::DspConfig;
use crate::txframe::{FrameLayout, PulseShape};
use crate::{Error, Result};

pub const VERSION: &str = concat!("cvqkd-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstellationConfig {
    pub cardinality: usize,
    /// Shaping parameter; `None` minimises the preparation error at `v_a`.
    pub nu: Option<f64>,
    pub v_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformConfig {
    pub symbol_rate: f64,
    pub center_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub blocks: usize,
    /// Quantum symbols per polarisation in each block.
    pub symbols_per_block: usize,
    pub master_seed: u64,
    pub calibration_samples: usize,
    /// Block forced through a diverging equaliser to exercise fault isolation.
    pub hostile_block: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub snr_db: Vec<f64>,
    pub noise_off_point: bool,
    pub rolloffs: Vec<f64>,
    pub rolloff_blocks: usize,
    pub rolloff_lf_noise_power: f64,
    pub distances_km: Vec<f64>,
    /// Bob-referred excess noise held fixed along the distance axis.
    pub distance_xi_b: f64,
    pub cardinalities: Vec<usize>,
    pub v_a: Vec<f64>,
    pub eps_prep_n_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub constellation: ConstellationConfig,
    pub frame: FrameLayout,
    pub pulse: PulseShape,
    pub waveform: WaveformConfig,
    pub channel: ChannelParams,
    pub dsp: DspConfig,
    pub security: SecurityParams,
    /// Preparation error entered into the budget; `None` computes it.
    pub eps_prep: Option<f64>,
    pub run: RunConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            constellation: ConstellationConfig { cardinality: 1024, nu: Some(0.0198), v_a: 5.0 },
            frame: FrameLayout::default(),
            pulse: PulseShape::default(),
            waveform: WaveformConfig { symbol_rate: 400e6, center_frequency: 500e6 },
            channel: ChannelParams { xi_b: 0.012, ..ChannelParams::default() },
            dsp: DspConfig::default(),
            security: SecurityParams::default(),
            eps_prep: None,
            run: RunConfig {
                blocks: 20,
                symbols_per_block: 100_000,
                master_seed: 1,
                calibration_samples: 1_000_000,
                hostile_block: None,
            },
            sweep: SweepConfig {
                snr_db: vec![0.0, 3.0, 6.0, 10.0],
                noise_off_point: true,
                rolloffs: vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
                rolloff_blocks: 4,
                rolloff_lf_noise_power: 100.0,
                distances_km: (0..=50).map(|k| 0.5 * k as f64).collect(),
                distance_xi_b: 0.016,
                cardinalities: vec![4, 256, 1024, 4096],
                v_a: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
                eps_prep_n_max: 80,
            },
        }
    }
}

/// A value that round-trips through the text format.
trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(f64, usize, u64, bool);

impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auto" | "none" => Ok(None),
            _ => T::parse(s).map(Some),
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "auto".into(), T::render)
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(T::parse).collect()
    }
    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for [usize; 2] {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v = Vec::<usize>::parse(s)?;
        v.try_into().map_err(|_| format!("`{s}`: expected two values"))
    }
    fn render(&self) -> String {
        format!("{},{}", self[0], self[1])
    }
}

impl ConfigValue for DetectorModel {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trusted" => Ok(DetectorModel::Trusted),
            "untrusted" => Ok(DetectorModel::Untrusted),
            _ => Err(format!("`{s}`: expected trusted or untrusted")),
        }
    }
    fn render(&self) -> String {
        match self {
            DetectorModel::Trusted => "trusted".into(),
            DetectorModel::Untrusted => "untrusted".into(),
        }
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        impl ExperimentConfig {
            /// All recognised keys in canonical order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Set one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// Resolved `(key, value)` pairs in canonical order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

keys! {
    "constellation.cardinality" => constellation.cardinality;
    "constellation.nu" => constellation.nu;
    "constellation.v_a" => constellation.v_a;
    "frame.pilot_fraction" => frame.pilot_fraction;
    "frame.pilot_gain_db" => frame.pilot_gain_db;
    "frame.cazac_length" => frame.cazac_length;
    "frame.cazac_roots" => frame.cazac_roots;
    "frame.interleave_period" => frame.interleave_period;
    "pulse.rolloff" => pulse.rolloff;
    "pulse.span_symbols" => pulse.span_symbols;
    "pulse.sps_num" => pulse.sps_num;
    "pulse.sps_den" => pulse.sps_den;
    "waveform.symbol_rate" => waveform.symbol_rate;
    "waveform.center_frequency" => waveform.center_frequency;
    "channel.distance_km" => channel.distance_km;
    "channel.loss_db_per_km" => channel.loss_db_per_km;
    "channel.loss_db_total" => channel.loss_db_total;
    "channel.eta" => channel.eta;
    "channel.v_el" => channel.v_el;
    "channel.xi_b" => channel.xi_b;
    "channel.linewidth_tx" => channel.linewidth_tx;
    "channel.linewidth_lo" => channel.linewidth_lo;
    "channel.cfo_hz" => channel.cfo_hz;
    "channel.pol_angle" => channel.pol_angle;
    "channel.pol_phase" => channel.pol_phase;
    "channel.lf_noise_power" => channel.lf_noise_power;
    "channel.lf_corner_hz" => channel.lf_corner_hz;
    "channel.delay_samples" => channel.delay_samples;
    "channel.receiver_gain" => channel.receiver_gain;
    "channel.shot_noise" => channel.shot_noise;
    "dsp.cma_taps" => dsp.cma_taps;
    "dsp.cma_step" => dsp.cma_step;
    "dsp.cma_iterations" => dsp.cma_iterations;
    "dsp.cma_tolerance" => dsp.cma_tolerance;
    "dsp.cma_window" => dsp.cma_window;
    "dsp.cma_divergence_factor" => dsp.cma_divergence_factor;
    "dsp.periodogram_fft_size" => dsp.periodogram_fft_size;
    "dsp.cfo_min_pilots" => dsp.cfo_min_pilots;
    "dsp.cfo_peak_threshold_db" => dsp.cfo_peak_threshold_db;
    "dsp.cfo_before_cma" => dsp.cfo_before_cma;
    "dsp.cma_pilot_init" => dsp.cma_pilot_init;
    "dsp.phase_pilot_window" => dsp.phase_pilot_window;
    "dsp.pilot_cancellation_span" => dsp.pilot_cancellation_span;
    "dsp.filter_span" => dsp.filter_span;
    "dsp.sync_psr_threshold" => dsp.sync_psr_threshold;
    "dsp.sync_search_symbols" => dsp.sync_search_symbols;
    "dsp.sync_segment" => dsp.sync_segment;
    "security.eps_total" => security.eps_total;
    "security.eps_prep" => eps_prep;
    "security.beta" => security.beta;
    "security.pe_fraction" => security.pe_fraction;
    "security.smoothing_fraction" => security.smoothing_fraction;
    "security.detector" => security.detector;
    "run.blocks" => run.blocks;
    "run.symbols_per_block" => run.symbols_per_block;
    "run.master_seed" => run.master_seed;
    "run.calibration_samples" => run.calibration_samples;
    "run.hostile_block" => run.hostile_block;
    "sweep.snr_db" => sweep.snr_db;
    "sweep.noise_off_point" => sweep.noise_off_point;
    "sweep.rolloffs" => sweep.rolloffs;
    "sweep.rolloff_blocks" => sweep.rolloff_blocks;
    "sweep.rolloff_lf_noise_power" => sweep.rolloff_lf_noise_power;
    "sweep.distances_km" => sweep.distances_km;
    "sweep.distance_xi_b" => sweep.distance_xi_b;
    "sweep.cardinalities" => sweep.cardinalities;
    "sweep.v_a" => sweep.v_a;
    "sweep.eps_prep_n_max" => sweep.eps_prep_n_max;
}

impl ExperimentConfig {
    /// Full-size campaign: 100 blocks of 1.8e6 symbols.
    pub fn full_scale(mut self) -> Self {
        self.run.blocks = 100;
        self.run.symbols_per_block = 1_800_000;
        self
    }

    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", line_no + 1)))?;
            if !seen.insert(key.trim().to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{}`", line_no + 1, key.trim())));
            }
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        self.set(key, value)
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    /// Provenance header for text artifacts, one `#` line per entry.
    pub fn provenance_header(&self) -> String {
        let mut out = format!("# {VERSION}\n# config_sha256 = {}\n", self.hash());
        for (k, v) in self.entries() {
            let _ = writeln!(out, "# {k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        let c = &self.constellation;
        if crate::constellation::grid_side(c.cardinality).is_none() {
            return Err(Error::Config(format!("cardinality {} is not an even power of 2", c.cardinality)));
        }
        if !(c.v_a > 0.0) || c.nu.is_some_and(|nu| !(nu >= 0.0)) {
            return Err(Error::Config("V_A must be positive and ν ≥ 0".into()));
        }
        self.frame.validate().map_err(wrap)?;
        self.layout().map_err(wrap)?;
        self.pulse.validate().map_err(wrap)?;
        if !(self.waveform.symbol_rate > 0.0) || !(self.waveform.center_frequency >= 0.0) {
            return Err(Error::Config("symbol rate and centre frequency must be positive".into()));
        }
        self.channel.validate().map_err(wrap)?;
        self.dsp_config().validate().map_err(wrap)?;
        self.security.validate().map_err(wrap)?;
        if self.eps_prep.is_some_and(|e| !(0.0..1.0).contains(&e)) {
            return Err(Error::Config("security.eps_prep must lie in [0, 1)".into()));
        }
        let r = &self.run;
        if r.blocks == 0 || r.symbols_per_block < 10_000 {
            return Err(Error::Config("need ≥ 1 block of ≥ 1e4 symbols".into()));
        }
        if r.calibration_samples < 100_000 {
            return Err(Error::Config("run.calibration_samples must be ≥ 1e5".into()));
        }
        let s = &self.sweep;
        if s.rolloffs.iter().any(|g| !(0.0..=1.0).contains(g)) || s.rolloff_blocks == 0 {
            return Err(Error::Config("sweep roll-offs must lie in [0, 1] with ≥ 1 block each".into()));
        }
        if s.distances_km.windows(2).any(|w| !(w[1] >= w[0])) || s.distances_km.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config("sweep.distances_km must be non-negative and non-decreasing".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<FrameLayout> {
        self.frame.with_quantum(self.run.symbols_per_block)
    }

    /// Receiver settings; roll-off and symbol rate follow the transmitter.
    pub fn dsp_config(&self) -> DspConfig {
        DspConfig { rolloff: self.pulse.rolloff, symbol_rate: self.waveform.symbol_rate, ..self.dsp.clone() }
    }

    pub fn security_params(&self, eps_prep: f64) -> SecurityParams {
        SecurityParams { eps_prep, ..self.security.clone() }
    }

    pub fn sweep_base(&self) -> SweepBase {
        SweepBase {
            v_a: self.constellation.v_a,
            eta: self.channel.eta,
            v_el: self.channel.v_el,
            xi_b: self.sweep.distance_xi_b,
            n: self.run.symbols_per_block,
            loss_db_per_km: self.channel.loss_db_per_km,
            symbol_rate: self.waveform.symbol_rate,
            pilot_fraction: self.frame.pilot_fraction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = ExperimentConfig::default();
        c.set("channel.loss_db_total", "3.1").unwrap();
        c.set("run.hostile_block", "4").unwrap();
        c.set("security.detector", "untrusted").unwrap();
        let back = ExperimentConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.entries().len(), ExperimentConfig::KEYS.len());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::parse("channel.etaa = 0.5"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("channel.eta = 0.5\nchannel.eta = 0.6"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("channel.eta = lots"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("channel.eta"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("channel.eta = 1.5"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_overrides_and_hash() {
        let c = ExperimentConfig::parse("# desk run\nrun.blocks = 3  # short\n\nsweep.snr_db = 0, 5\n").unwrap();
        assert_eq!(c.run.blocks, 3);
        assert_eq!(c.sweep.snr_db, vec![0.0, 5.0]);
        let mut d = c.clone();
        d.apply_override("channel.xi_b=0.02").unwrap();
        assert_ne!(c.hash(), d.hash());
        assert_eq!(c.hash().len(), 64);
        assert!(d.apply_override("channel.xi_b").is_err());
    }

    #[test]
    fn full_scale_and_derived_settings() {
        let c = ExperimentConfig::default();
        assert_eq!((c.run.blocks, c.run.symbols_per_block), (20, 100_000));
        let f = c.clone().full_scale();
        assert_eq!((f.run.blocks, f.run.symbols_per_block), (100, 1_800_000));
        let mut g = c.clone();
        g.set("pulse.rolloff", "0.4").unwrap();
        assert_eq!(g.dsp_config().rolloff, 0.4);
        assert_eq!(g.layout().unwrap().n_quantum(), 100_000);
        assert!(c.provenance_header().contains(&c.hash()));
    }
}
