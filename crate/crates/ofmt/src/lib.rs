//! Baseband laboratory for the overlapped filtered multi-tone spread-spectrum
//! (OFMT-SS) waveform.
//!
//! The crate covers the full chain: square-root Nyquist prototype design and
//! the composite pulse algebra (`pulse`), ICI-free spreading codes and
//! multi-code sets (`codes`), simulated-annealing crest/autocorrelation
//! optimization (`anneal`), transmit synthesis and the analysis filter bank
//! with FFT multi-code correlation (`modem`), clip-and-filter PAPR reduction
//! with EVM accounting (`clip`), and AWGN Monte-Carlo error-rate experiments
//! (`sim`). `signal`, `fft`, and `spectrum` hold the shared DSP plumbing.
//!
//! Conventions: the symbol interval is T = 1.0 s, all frequencies are
//! multiples of 1/T, and signals live on the grid t = m / (P·L/T).

pub mod anneal;
pub mod clip;
pub mod codes;
pub mod fft;
pub mod modem;
pub mod pulse;
pub mod signal;
pub mod sim;
pub mod spectrum;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sample-rate mismatch: {0} vs {1}")]
    RateMismatch(f64, f64),
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),
    #[error("length must be a power of two, got {0}")]
    NonPowerOfTwo(usize),
    #[error("segment length {segment} exceeds half the signal length {len}")]
    SegmentTooLong { segment: usize, len: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("prototype design failed: Nyquist leakage {leakage:.3e} exceeds tolerance {tol:.3e}")]
    DesignFailure { leakage: f64, tol: f64 },
    #[error("chip entries must be +1 or -1")]
    NonBinaryChip,
    #[error("spreading gains must be unit amplitude (max deviation {0:.3e})")]
    NonUnitAmplitude(f64),
    #[error("exhaustive search rejected: L = {0} exceeds the 2^20 cost guard")]
    SearchTooLarge(usize),
    #[error("cost callback returned a non-finite value at iteration {0}")]
    NonFiniteCost(u64),
    #[error("signal too short: {needed} samples needed, {got} available")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("band edge {edge} Hz is beyond Nyquist {nyquist} Hz")]
    BandEdgeBeyondNyquist { edge: f64, nyquist: f64 },
    #[error("spreading code fails the ICI-free constraint (residual {0:.3e})")]
    IciConstraint(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
