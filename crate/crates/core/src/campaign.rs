//! End-to-end experiments: block campaigns, back-to-back SNR, roll-off,
//! distance and preparation-error sweeps.
//!
//! Block `b` of a campaign uses `rng::split(master_seed, b)` and shares no
//! state with other blocks, so results do not depend on scheduling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{calibrate, propagate, CalibrationRecord, ChannelParams};
use crate::config::{ExperimentConfig, VERSION};
use crate::constellation::{build_pcs_qam, sample_symbols, scale_to_variance, ConstellationSpec};
use crate::estimation::{estimate_parameters, EstimatedParams};
use crate::keyrate::{self, secret_fraction, skr, KeyRateResult, Regime, SweepRow};
use crate::prep_error::{self, PrepError};
use crate::rng::{self, Stream};
use crate::rxdsp::{run_dsp, DspReport};
use crate::txframe::{build_frame, pilot_reference, shape_and_upconvert};
use crate::{Error, Result};

/// Seed namespaces for the non-campaign experiments.
const B2B_SEEDS: u64 = 0xb2b;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockOutcome {
    pub block: u64,
    pub seed: u64,
    pub calibration: Option<CalibrationRecord>,
    pub estimate: Option<EstimatedParams>,
    pub finite: Option<KeyRateResult>,
    pub asymptotic: Option<KeyRateResult>,
    pub skr_bps: f64,
    pub dsp: DspReport,
    pub error: Option<String>,
}

impl BlockOutcome {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn xi_b_worst(&self) -> Option<f64> {
        self.finite.as_ref().map(|k| k.xi_b_used)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Stats {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Stats { count: 0, mean: f64::NAN, std: f64::NAN, min: f64::NAN, max: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Stats {
            count: v.len(),
            mean,
            std: var.sqrt(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> f64 {
        self.std / (self.count as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub version: String,
    pub config_sha256: String,
    pub config: Vec<(String, String)>,
    pub nu: f64,
    pub eps_prep: f64,
    /// `ε + ε_prep`.
    pub total_security: f64,
    pub blocks: usize,
    pub failed_blocks: Vec<u64>,
    pub t_hat: Stats,
    pub v_el: Stats,
    pub xi_b_hat: Stats,
    pub xi_b_worst: Stats,
    pub sf_finite: Stats,
    pub skr_bps: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub outcomes: Vec<BlockOutcome>,
    pub summary: CampaignSummary,
}

/// Constellation shared by every block; `ν` is optimised when not fixed.
pub fn resolve_constellation(config: &ExperimentConfig) -> Result<ConstellationSpec> {
    let c = &config.constellation;
    let nu = match c.nu {
        Some(nu) => nu,
        None => prep_error::minimize_eps_prep(c.cardinality, c.v_a, config.sweep.eps_prep_n_max)?.nu,
    };
    scale_to_variance(&build_pcs_qam(c.cardinality, nu)?, c.v_a)
}

/// Preparation error of the resolved constellation unless configured.
pub fn resolve_eps_prep(config: &ExperimentConfig, spec: &ConstellationSpec) -> Result<f64> {
    match config.eps_prep {
        Some(e) => Ok(e),
        None => Ok(prep_error::eps_prep(spec.cardinality, spec.nu, config.constellation.v_a, config.sweep.eps_prep_n_max)?
            .eps),
    }
}

struct BlockResult {
    calibration: CalibrationRecord,
    estimate: EstimatedParams,
    finite: KeyRateResult,
    asymptotic: KeyRateResult,
    skr_bps: f64,
}

/// Signal path up to parameter estimation.
fn measure(
    config: &ExperimentConfig,
    spec: &ConstellationSpec,
    channel: &ChannelParams,
    seed: u64,
    block: u64,
    report: &mut DspReport,
) -> Result<(CalibrationRecord, EstimatedParams)> {
    let n = config.run.symbols_per_block;
    let symbols = sample_symbols(spec, n, seed)?;
    let layout = config.layout()?;
    let pilot_seed = rng::stream(seed, Stream::Pilots);
    let frame = build_frame(&symbols, &layout, pilot_seed)?;
    let wave = shape_and_upconvert(&frame, &config.pulse, config.waveform.symbol_rate, config.waveform.center_frequency)?;
    let params = ChannelParams { seed: rng::stream(seed, Stream::Channel), ..channel.clone() };
    let received = propagate(&wave, &params)?;
    drop(wave);
    let calibration = if params.shot_noise {
        calibrate(&params, config.run.calibration_samples, seed)?
    } else {
        CalibrationRecord::exact(&params)
    };
    let mut dsp = config.dsp_config();
    if config.run.hostile_block == Some(block) {
        dsp.cma_step = 0.1;
    }
    let reference = pilot_reference(&layout, pilot_seed, symbols.modulation_variance)?;
    let out = match run_dsp(&received, &reference, &dsp, &calibration) {
        Ok(out) => out,
        Err(failure) => {
            *report = failure.report;
            return Err(failure.error);
        }
    };
    *report = out.report;
    let q = [out.frame.quantum_symbols(0), out.frame.quantum_symbols(1)];
    let mut estimate = estimate_parameters(
        [&symbols.symbols_x, &symbols.symbols_y],
        [&q[0], &q[1]],
        params.eta,
        calibration.v_el(),
        symbols.modulation_variance,
    )?;
    estimate.block_id = block;
    Ok((calibration, estimate))
}

/// Measurement followed by the key-rate stage.
fn simulate(
    config: &ExperimentConfig,
    spec: &ConstellationSpec,
    channel: &ChannelParams,
    seed: u64,
    block: u64,
    report: &mut DspReport,
) -> Result<BlockResult> {
    let (calibration, estimate) = measure(config, spec, channel, seed, block, report)?;
    let security = config.security_params(0.0);
    let finite = secret_fraction(&estimate, &security, Regime::FiniteSize)?;
    let asymptotic = secret_fraction(&estimate, &security, Regime::Asymptotic)?;
    let skr_bps = skr(finite.secret_fraction, config.waveform.symbol_rate, config.frame.pilot_fraction)?;
    Ok(BlockResult { calibration, estimate, finite, asymptotic, skr_bps })
}

/// Run one block: sample, frame, propagate, calibrate, DSP, estimate, key rate.
/// Errors are recorded in the outcome rather than returned.
pub fn run_block(config: &ExperimentConfig, spec: &ConstellationSpec, block: u64) -> BlockOutcome {
    let seed = rng::split(config.run.master_seed, block);
    let mut report = DspReport::default();
    match simulate(config, spec, &config.channel, seed, block, &mut report) {
        Ok(r) => BlockOutcome {
            block,
            seed,
            calibration: Some(r.calibration),
            estimate: Some(r.estimate),
            finite: Some(r.finite),
            asymptotic: Some(r.asymptotic),
            skr_bps: r.skr_bps,
            dsp: report,
            error: None,
        },
        Err(e) => BlockOutcome {
            block,
            seed,
            calibration: None,
            estimate: None,
            finite: None,
            asymptotic: None,
            skr_bps: 0.0,
            dsp: report,
            error: Some(e.to_string()),
        },
    }
}

pub fn summarize(config: &ExperimentConfig, spec: &ConstellationSpec, eps_prep: f64, outcomes: &[BlockOutcome]) -> CampaignSummary {
    let ok: Vec<&BlockOutcome> = outcomes.iter().filter(|o| !o.failed()).collect();
    let est = || ok.iter().filter_map(|o| o.estimate.as_ref());
    CampaignSummary {
        version: VERSION.into(),
        config_sha256: config.hash(),
        config: config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        nu: spec.nu,
        eps_prep,
        total_security: config.security_params(eps_prep).total_security(),
        blocks: outcomes.len(),
        failed_blocks: outcomes.iter().filter(|o| o.failed()).map(|o| o.block).collect(),
        t_hat: Stats::of(est().map(|e| e.t_hat)),
        v_el: Stats::of(est().map(|e| e.v_el)),
        xi_b_hat: Stats::of(est().map(|e| e.xi_b_hat)),
        xi_b_worst: Stats::of(ok.iter().filter_map(|o| o.xi_b_worst())),
        sf_finite: Stats::of(ok.iter().filter_map(|o| o.finite.as_ref().map(|k| k.secret_fraction))),
        skr_bps: Stats::of(ok.iter().map(|o| o.skr_bps)),
    }
}

/// Run `run.blocks` blocks in parallel; outcomes are ordered by block index.
pub fn run_block_campaign(config: &ExperimentConfig) -> Result<Campaign> {
    config.validate()?;
    let spec = resolve_constellation(config)?;
    let eps_prep = resolve_eps_prep(config, &spec)?;
    let outcomes: Vec<BlockOutcome> =
        (0..config.run.blocks as u64).into_par_iter().map(|b| run_block(config, &spec, b)).collect();
    let summary = summarize(config, &spec, eps_prep, &outcomes);
    Ok(Campaign { outcomes, summary })
}

fn num(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), |v| format!("{v:.9e}"))
}

/// Per-block CSV with the provenance header.
pub fn write_block_csv<W: Write>(config: &ExperimentConfig, outcomes: &[BlockOutcome], mut out: W) -> Result<()> {
    out.write_all(config.provenance_header().as_bytes())?;
    writeln!(out, "block,xi_B_hat,xi_B_worst,T_hat,V_B_hat,V_el,N,seed,SF_finite,SF_asymptotic,SKR_bps,status")?;
    for o in outcomes {
        let e = o.estimate.as_ref();
        let status = o.error.as_deref().map_or_else(|| "ok".to_string(), |m| format!("\"failed: {}\"", m.replace('"', "'")));
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            o.block,
            num(e.map(|e| e.xi_b_hat)),
            num(o.xi_b_worst()),
            num(e.map(|e| e.t_hat)),
            num(e.map(|e| e.v_b_hat)),
            num(e.map(|e| e.v_el)),
            e.map_or(0, |e| e.n),
            o.seed,
            num(o.finite.as_ref().map(|k| k.secret_fraction)),
            num(o.asymptotic.as_ref().map(|k| k.secret_fraction)),
            num(Some(o.skr_bps)),
            status
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct B2bRow {
    /// `None` for the noise-free point.
    pub target_snr_db: Option<f64>,
    pub v_a: f64,
    pub ideal_snr_db: f64,
    pub dsp_snr_db: f64,
    pub error: Option<String>,
}

impl B2bRow {
    pub fn penalty_db(&self) -> f64 {
        self.ideal_snr_db - self.dsp_snr_db
    }
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Back-to-back (T = 1) SNR characterisation: the calibrated ideal SNR
/// `ηV_A/2/(1 + V_el)` against the SNR measured after the full DSP chain.
/// `V_A` is chosen per point to hit the target under the nominal `V_el`.
pub fn run_b2b_snr(config: &ExperimentConfig, snr_grid_db: &[f64], noise_off_point: bool) -> Result<Vec<B2bRow>> {
    config.validate()?;
    let base = ChannelParams { distance_km: 0.0, loss_db_total: None, xi_b: 0.0, ..config.channel.clone() };
    let mut points: Vec<(Option<f64>, ChannelParams)> = snr_grid_db.iter().map(|&s| (Some(s), base.clone())).collect();
    if noise_off_point {
        let quiet = ChannelParams { v_el: 0.0, shot_noise: false, linewidth_tx: 0.0, linewidth_lo: 0.0, ..base.clone() };
        points.push((None, quiet));
    }
    let seed_root = rng::split(config.run.master_seed, B2B_SEEDS);
    points
        .par_iter()
        .enumerate()
        .map(|(k, (target, channel))| {
            let v_a = match target {
                Some(s) => 2.0 * (1.0 + channel.v_el) * 10f64.powf(s / 10.0) / channel.eta,
                None => config.constellation.v_a,
            };
            let mut cfg = config.clone();
            cfg.constellation.v_a = v_a;
            let spec = resolve_constellation(&cfg)?;
            let mut report = DspReport::default();
            let seed = rng::split(seed_root, k as u64);
            // At T = 1 the estimate may exceed 1 by sampling error; no key rate is needed here.
            let (ideal, measured, error) = match measure(&cfg, &spec, channel, seed, k as u64, &mut report) {
                Ok((calibration, e)) => {
                    let ideal = db(channel.eta * v_a / 2.0 / (1.0 + calibration.v_el()));
                    let noise = e.total_noise();
                    (ideal, db((e.v_b_hat - noise) / noise), None)
                }
                Err(e) => (f64::NAN, f64::NAN, Some(e.to_string())),
            };
            let ideal = if target.is_none() { f64::INFINITY } else { ideal };
            Ok(B2bRow { target_snr_db: *target, v_a, ideal_snr_db: ideal, dsp_snr_db: measured, error })
        })
        .collect()
}

pub fn write_b2b_csv<W: Write>(config: &ExperimentConfig, rows: &[B2bRow], mut out: W) -> Result<()> {
    out.write_all(config.provenance_header().as_bytes())?;
    writeln!(out, "target_snr_dB,V_A,ideal_snr_dB,dsp_snr_dB,penalty_dB,status")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            r.target_snr_db.map_or_else(|| "noise_off".into(), |s| s.to_string()),
            r.v_a,
            r.ideal_snr_db,
            r.dsp_snr_db,
            r.penalty_db(),
            r.error.as_deref().map_or_else(|| "ok".to_string(), |m| format!("\"failed: {}\"", m.replace('"', "'")))
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloffRow {
    pub rolloff: f64,
    pub blocks: usize,
    pub failed: usize,
    pub xi_b_hat: Stats,
    pub t_hat: Stats,
}

/// Excess noise against roll-off with the low-frequency noise source on.
/// Every roll-off reuses the same block seeds.
pub fn run_rolloff_sweep(config: &ExperimentConfig) -> Result<Vec<RolloffRow>> {
    config.validate()?;
    let spec = resolve_constellation(config)?;
    let jobs: Vec<(usize, u64)> = (0..config.sweep.rolloffs.len())
        .flat_map(|i| (0..config.sweep.rolloff_blocks as u64).map(move |b| (i, b)))
        .collect();
    let outcomes: Vec<(usize, BlockOutcome)> = jobs
        .par_iter()
        .map(|&(i, b)| {
            let mut cfg = config.clone();
            cfg.pulse.rolloff = config.sweep.rolloffs[i];
            cfg.channel.lf_noise_power = config.sweep.rolloff_lf_noise_power;
            cfg.run.hostile_block = None;
            (i, run_block(&cfg, &spec, b))
        })
        .collect();
    Ok(config
        .sweep
        .rolloffs
        .iter()
        .enumerate()
        .map(|(i, &rolloff)| {
            let group: Vec<&BlockOutcome> = outcomes.iter().filter(|(j, _)| *j == i).map(|(_, o)| o).collect();
            let est = || group.iter().filter_map(|o| o.estimate.as_ref());
            RolloffRow {
                rolloff,
                blocks: group.len(),
                failed: group.iter().filter(|o| o.failed()).count(),
                xi_b_hat: Stats::of(est().map(|e| e.xi_b_hat)),
                t_hat: Stats::of(est().map(|e| e.t_hat)),
            }
        })
        .collect())
}

pub fn write_rolloff_csv<W: Write>(config: &ExperimentConfig, rows: &[RolloffRow], mut out: W) -> Result<()> {
    out.write_all(config.provenance_header().as_bytes())?;
    writeln!(out, "rolloff,blocks,failed,xi_B_mean,xi_B_sem,xi_B_min,xi_B_max,T_mean")?;
    for r in rows {
        let x = &r.xi_b_hat;
        writeln!(
            out,
            "{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.rolloff,
            r.blocks,
            r.failed,
            x.mean,
            x.sem(),
            x.min,
            x.max,
            r.t_hat.mean
        )?;
    }
    Ok(())
}

/// Secret fraction against distance at fixed Bob-side excess noise, plus the
/// finite-size zero crossing searched up to the last grid distance.
pub fn run_distance_sweep(config: &ExperimentConfig) -> Result<(Vec<SweepRow>, Option<f64>)> {
    config.validate()?;
    let base = config.sweep_base();
    let security = config.security_params(0.0);
    let rows = keyrate::distance_sweep(&base, &config.sweep.distances_km, &security)?;
    let hi = config.sweep.distances_km.last().copied().unwrap_or(0.0).max(1.0);
    let crossing = keyrate::zero_crossing_km(&base, &security, 0.0, hi)?;
    Ok((rows, crossing))
}

pub fn write_distance_csv<W: Write>(config: &ExperimentConfig, rows: &[SweepRow], mut out: W) -> Result<()> {
    out.write_all(config.provenance_header().as_bytes())?;
    keyrate::write_sweep_csv(rows, out)
}

/// Minimised preparation error over the cardinality × `V_A` grid. Bypasses
/// the waveform path.
pub fn run_eps_prep_sweep(config: &ExperimentConfig) -> Result<Vec<PrepError>> {
    let n_max = config.sweep.eps_prep_n_max;
    let grid: Vec<(usize, f64)> = config
        .sweep
        .cardinalities
        .iter()
        .flat_map(|&k| config.sweep.v_a.iter().map(move |&v| (k, v)))
        .collect();
    if grid.is_empty() {
        return Err(Error::Config("empty ε_prep sweep grid".into()));
    }
    grid.par_iter().map(|&(k, v)| prep_error::minimize_eps_prep(k, v, n_max)).collect()
}

pub fn write_eps_prep_csv<W: Write>(config: &ExperimentConfig, rows: &[PrepError], mut out: W) -> Result<()> {
    out.write_all(config.provenance_header().as_bytes())?;
    prep_error::write_sweep_csv(rows, out)
}
