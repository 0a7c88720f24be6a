//! Benchmark fixtures shared by the criterion benches.

use cvqkd_core::channel::{calibrate, propagate, ChannelParams};
use cvqkd_core::constellation::{build_pcs_qam, sample_symbols, scale_to_variance, ConstellationSpec};
use cvqkd_core::prelude::*;
use cvqkd_core::txframe::{build_frame, pilot_reference, shape_and_upconvert, PilotReference};

pub const V_A: f64 = 5.0;

pub fn constellation() -> ConstellationSpec {
    scale_to_variance(&build_pcs_qam(1024, 0.0198).unwrap(), V_A).unwrap()
}

/// A received back-to-back block ready for the DSP chain.
pub struct Received {
    pub wave: IQWaveform,
    pub reference: PilotReference,
    pub calibration: CalibrationRecord,
    pub config: DspConfig,
}

pub fn received(n: usize, seed: u64) -> Received {
    let symbols = sample_symbols(&constellation(), n, seed).unwrap();
    let layout = FrameLayout::for_quantum(n).unwrap();
    let frame = build_frame(&symbols, &layout, seed + 1).unwrap();
    let tx = shape_and_upconvert(&frame, &PulseShape::default(), 400e6, 500e6).unwrap();
    let params = ChannelParams { distance_km: 0.0, cfo_hz: 5e6, pol_angle: 0.3, seed: seed + 2, ..Default::default() };
    Received {
        wave: propagate(&tx, &params).unwrap(),
        reference: pilot_reference(&layout, seed + 1, V_A).unwrap(),
        calibration: calibrate(&params, 200_000, seed + 3).unwrap(),
        config: DspConfig { cfo_min_pilots: 1000, ..Default::default() },
    }
}
