use std::f64::consts::PI;

use num_complex::Complex64;

use super::ComplexSignal;
use crate::error::{Error, Result};

/// Chip sequence of data symbol 0 in the 2.4 GHz O-QPSK PHY, `c0` first.
pub const ZERO_SYMBOL_CHIPS: [u8; 32] = [
    1, 1, 0, 1, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreambleConfig {
    pub sample_rate: f64,
    pub chips_per_symbol: usize,
    pub samples_per_chip: usize,
    pub num_symbols: usize,
}

impl Default for PreambleConfig {
    fn default() -> Self {
        Self {
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            chips_per_symbol: ZERO_SYMBOL_CHIPS.len(),
            samples_per_chip: 5,
            num_symbols: 8,
        }
    }
}

impl PreambleConfig {
    pub fn signal_len(&self) -> usize {
        self.chips_per_symbol * self.samples_per_chip * self.num_symbols
    }
}

/// Builds the clean preamble: `num_symbols` repetitions of the zero symbol,
/// O-QPSK with half-sine chip shaping.
///
/// Even chips ride on I, odd chips on Q delayed by one chip period. Each
/// half-sine pulse spans two chip periods. The symbol is built cyclically
/// (the tail of the last Q chip wraps onto the symbol start) so that all
/// symbols are bit-identical and the envelope is constant.
pub fn gen_preamble(cfg: &PreambleConfig) -> Result<ComplexSignal> {
    if cfg.chips_per_symbol != ZERO_SYMBOL_CHIPS.len() {
        return Err(Error::config(format!(
            "chips_per_symbol must be {}, got {}",
            ZERO_SYMBOL_CHIPS.len(),
            cfg.chips_per_symbol
        )));
    }
    if cfg.samples_per_chip == 0 || cfg.num_symbols == 0 {
        return Err(Error::config(
            "samples_per_chip and num_symbols must be at least 1",
        ));
    }
    if !(cfg.sample_rate.is_finite() && cfg.sample_rate > 0.0) {
        return Err(Error::config("sample_rate must be positive and finite"));
    }

    let spc = cfg.samples_per_chip;
    let pulse_len = 2 * spc;
    let sym_len = cfg.chips_per_symbol * spc;
    let level = |chip: u8| if chip == 1 { 1.0 } else { -1.0 };

    let symbol: Vec<Complex64> = (0..sym_len)
        .map(|k| {
            let i_pulse = k / pulse_len;
            let i_phase = PI * (k % pulse_len) as f64 / pulse_len as f64;
            let i = level(ZERO_SYMBOL_CHIPS[2 * i_pulse]) * i_phase.sin();

            let kq = (k + sym_len - spc) % sym_len;
            let q_pulse = kq / pulse_len;
            let q_phase = PI * (kq % pulse_len) as f64 / pulse_len as f64;
            let q = level(ZERO_SYMBOL_CHIPS[2 * q_pulse + 1]) * q_phase.sin();

            Complex64::new(i, q)
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.signal_len());
    for _ in 0..cfg.num_symbols {
        samples.extend_from_slice(&symbol);
    }
    Ok(ComplexSignal::new(samples, cfg.sample_rate))
}
