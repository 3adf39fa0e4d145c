//! Sparse CDMA multiuser detection.
//!
//! Building blocks for simulating a sparsely spread uplink and detecting the
//! users' BPSK symbols:
//!
//! - [`signature`]: regular sparse masks and signature matrices `A = H ⊙ W`.
//! - [`channel`]: the normalised AWGN channel `y = √(n0/k)·A·x + w₀` and BER.
//! - [`detect_bp`]: belief propagation on the mask factor graph.
//! - [`detect_pg`]: projected-gradient detectors with per-iteration steps.
//! - [`train`]: reverse-mode gradients, Adam, incremental and joint training.
//! - [`harness`]: BER sweeps, the exhaustive ML reference and op audits.
//! - [`cli`]: the `scdma` command-line front end.

pub mod channel;
pub mod cli;
pub mod detect_bp;
pub mod detect_pg;
pub mod error;
pub mod harness;
pub mod ops;
pub mod rng;
pub mod signature;
pub mod train;

pub use error::{Error, Result};
