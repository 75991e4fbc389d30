//! Simulator and signal-processing library for an asynchronous, Gold-coded
//! BPSK backscatter protocol.
//!
//! The crate covers the full chain in software:
//!
//! * [`codes`] — maximal-length and Gold spreading sequences plus their
//!   correlation analytics,
//! * [`phy`] — baseband I/Q packet synthesis, clock models, stream
//!   superposition with AWGN, and link-budget arithmetic,
//! * [`rx`] — matched-filter synthesis, clock/slot recovery, filter banks,
//!   and event detection in continuous or discrete-timing mode,
//! * [`netsim`] — node populations, event sources, and end-to-end scenario
//!   execution,
//! * [`metrics`] — event-error-rate accounting, analytic capacity bounds,
//!   and the parameter sweeps used for scalability studies,
//! * [`io`] — the on-disk formats (I/Q capture files, code descriptors,
//!   event tables, detection and error reports).
//!
//! Everything is deterministic: a scenario is a pure function of its config
//! and master seed, independent of thread count. Per-node randomness comes
//! from counter-derived ChaCha streams (see [`rng`]), parallel reductions
//! use fixed chunk boundaries, and all reports are emitted in canonical
//! order.

pub mod codes;
pub mod io;
pub mod metrics;
pub mod netsim;
pub mod par;
pub mod phy;
pub mod rng;
pub mod rx;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("LFSR initial state must be nonzero (the all-zero state is absorbing)")]
    ZeroInitialState,

    #[error("invalid LFSR spec: {0}")]
    InvalidLfsr(String),

    #[error("taps of degree {degree} are not primitive: observed period {observed} != {expected}")]
    NonPrimitiveTaps {
        degree: u32,
        observed: usize,
        expected: usize,
    },

    #[error("LFSR pair must have equal degree (got {0} and {1})")]
    DegreeMismatch(u32, u32),

    #[error("pair is not a preferred pair: cross-correlation values {0:?}")]
    NotPreferredPair(Vec<i64>),

    #[error("code seed {seed} out of range [0, {max}]")]
    SeedOutOfRange { seed: u32, max: u32 },

    #[error("requested length {length} exceeds code period {period}")]
    LengthExceedsPeriod { length: usize, period: usize },

    #[error("sequence lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("clock {f_clk_hz} Hz too fast for sample rate {sample_rate_hz} Hz (undersampled)")]
    ClockTooFast { f_clk_hz: f64, sample_rate_hz: f64 },

    #[error("packet duration {packet_s} s does not fit in a {bin_s} s event bin")]
    PacketExceedsBin { packet_s: f64, bin_s: f64 },

    #[error("event rate {rate_hz} Hz saturates the {bin_s} s bin grid")]
    RateTooHigh { rate_hz: f64, bin_s: f64 },

    #[error("event bin grids differ ({0} s vs {1} s)")]
    GridMismatch(f64, f64),

    #[error("stream of {stream_len} samples shorter than the {filter_len}-sample reference")]
    StreamTooShort { stream_len: usize, filter_len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
