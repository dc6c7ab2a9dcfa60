//! Synthetic received-signal corpus: clean preamble, per-device hardware
//! impairments, propagation channels and labeled dataset files.

mod channel;
mod dataset;
mod device;
mod preamble;

pub use channel::{add_awgn, apply_channel, complex_gaussian, ChannelKind, ChannelSpec};
pub use dataset::{
    gen_dataset, read_signals, split_paths, ChannelRecipe, DatasetConfig, DatasetManifest,
    DevicePool, LabeledSignals, ManifestRecord, SplitConfig, MANIFEST_FORMAT_VERSION,
};
pub use device::{apply_device, DeviceProfile, ImpairmentSpread};
pub use preamble::{gen_preamble, PreambleConfig, ZERO_SYMBOL_CHIPS};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: f64 = 1e7;
pub const DEFAULT_SIGNAL_LEN: usize = 1280;

/// One received (or clean) baseband preamble.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSignal {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
}

impl ComplexSignal {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize, sample_rate: f64) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|s| s.re.is_finite() && s.im.is_finite())
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::config("signal contains non-finite samples"))
        }
    }
}
