//! Software twin of a continuous-variable QKD link driven by probabilistically
//! shaped 2^M-QAM.
//!
//! The crate is organised along the signal path:
//!
//! * [`constellation`]: Maxwell-Boltzmann shaped square QAM and symbol sampling.
//! * [`prep_error`]: trace distance between the shaped coherent-state ensemble
//!   and the Gaussian (thermal) ensemble, in a truncated Fock basis.
//! * [`txframe`]: CAZAC preamble, pilot interleaving, RRC pulse shaping and
//!   digital upconversion.
//! * [`channel`]: fiber, lasers and coherent receiver front-end in shot-noise
//!   units, plus shot/electrical noise calibration.
//! * [`rxdsp`]: matched filtering, synchronisation, CMA polarisation
//!   demultiplexing, carrier frequency and phase recovery.
//! * [`estimation`]: channel parameter estimation and the worst-case excess
//!   noise bound.
//! * [`keyrate`]: mutual information, Holevo bound, finite-size secret fraction.
//! * [`campaign`] and [`config`]: reproducible multi-block experiments.

// Negated comparisons below are deliberate: they also reject NaN.
// Index loops mirror the matrix and tap formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod campaign;
pub mod channel;
pub mod config;
pub mod constellation;
pub mod error;
pub mod estimation;
pub mod keyrate;
pub mod prep_error;
pub mod rng;
pub mod rxdsp;
pub mod txframe;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Shared type re-exports for downstream crates.
pub mod prelude {
    pub use crate::campaign::{BlockOutcome, CampaignSummary};
    pub use crate::channel::{CalibrationRecord, ChannelParams};
    pub use crate::config::ExperimentConfig;
    pub use crate::constellation::{ConstellationSpec, SymbolBlock};
    pub use crate::estimation::EstimatedParams;
    pub use crate::keyrate::{KeyRateResult, Regime, SecurityParams};
    pub use crate::prep_error::{PrepError, TruncatedState};
    pub use crate::rxdsp::{DspConfig, DspReport};
    pub use crate::txframe::{FrameLayout, IQWaveform, PulseShape, SymbolFrame};
    pub use crate::{Complex64, Error, Result};
}
