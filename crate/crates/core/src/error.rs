use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("Fock truncation insufficient: tail {tail:e} exceeds tolerance {tolerance:e} at n_max = {n_max}")]
    Truncation { n_max: usize, tail: f64, tolerance: f64 },

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("synchronisation failed: peak-to-sidelobe ratio {psr:.2} below {threshold:.2}")]
    SyncFailure { psr: f64, threshold: f64 },

    #[error("equalizer diverged: {0}")]
    EqualizerDivergence(String),

    #[error("carrier frequency estimation failed: peak {peak_db:.1} dB over floor, need {threshold_db:.1} dB")]
    CfoFailure { peak_db: f64, threshold_db: f64 },

    #[error("sent/received symbols misaligned (normalised correlation {0:.4})")]
    Alignment(f64),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("unphysical parameter set: symplectic eigenvalue {0} < 1")]
    CovarianceValidity(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
