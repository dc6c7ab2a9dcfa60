use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::{ExtractorConfig, UnetConfig};
use crate::nn::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Disentangled representation learning with background shuffling.
    Dr,
    /// Plain maximum-likelihood training of the extractor.
    Ml,
    /// Training with additive-noise augmentation.
    Awgn,
    /// Training with random FIR-filter augmentation.
    Fir,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dr, Method::Ml, Method::Awgn, Method::Fir];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dr => "dr",
            Method::Ml => "ml",
            Method::Awgn => "awgn",
            Method::Fir => "fir",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}; expected dr, ml, awgn or fir")))
    }
}

/// Augmentation used by the `awgn` and `fir` baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// SNR range in dB; `None` disables the noise.
    pub awgn_snr_db: Option<[f64; 2]>,
    pub fir_taps: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            awgn_snr_db: Some([5.0, 30.0]),
            fir_taps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub unet: UnetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            unet: UnetConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Narrower networks sized for single-core CPU runs.
    pub fn desk_scale() -> Self {
        Self {
            extractor: ExtractorConfig {
                base_width: 8,
                max_width: 64,
                ..ExtractorConfig::default()
            },
            unet: UnetConfig {
                widths: [4, 8, 16, 32, 64],
                ..UnetConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.unet.validate()?;
        if self.extractor.input_shape != self.unet.input_shape {
            return Err(Error::config("extractor and u-net input shapes differ"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Epochs between held-out evaluations; 0 disables them.
    pub eval_every: usize,
    /// Q/G updates per F update.
    pub qg_per_f: usize,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dr,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            eval_every: 1,
            qg_per_f: 1,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("adam moments must lie in [0, 1)"));
        }
        if self.qg_per_f == 0 {
            return Err(Error::config("qg_per_f must be at least 1"));
        }
        if self.augment.fir_taps == 0 {
            return Err(Error::config("fir augmentation needs at least one tap"));
        }
        if let Some([lo, hi]) = self.augment.awgn_snr_db {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::config("awgn snr range must be finite and ordered"));
            }
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}
