//! Channel-robust RF fingerprint extraction through disentangled
//! representation learning.
//!
//! A received preamble is split into a device-relevant embedding (the RF
//! fingerprint) and a device-irrelevant background. Backgrounds are swapped
//! across records to synthesize extra training signals, which keeps the
//! fingerprint extractor from latching onto channel conditions.

pub mod cli_io;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod models;
pub mod nn;
pub mod preprocessing;
pub mod rng;
pub mod signal_sim;
pub mod training;
pub mod visualization;

pub use error::{Error, Result};
