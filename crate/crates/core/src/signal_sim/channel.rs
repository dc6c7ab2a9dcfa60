use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ComplexSignal;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
    RicianFlat,
    MultipathFir,
}

/// A propagation channel. `snr_db = None` disables additive noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub rician_k: f64,
    #[serde(default = "one")]
    pub num_taps: usize,
    #[serde(default)]
    pub pdp_decay: f64,
}

fn one() -> usize {
    1
}

impl ChannelSpec {
    pub fn awgn(snr_db: Option<f64>) -> Self {
        Self {
            kind: ChannelKind::Awgn,
            snr_db,
            rician_k: 0.0,
            num_taps: 1,
            pdp_decay: 0.0,
        }
    }

    pub fn rician(rician_k: f64, snr_db: Option<f64>) -> Self {
        Self {
            kind: ChannelKind::RicianFlat,
            rician_k,
            ..Self::awgn(snr_db)
        }
    }

    pub fn multipath(num_taps: usize, pdp_decay: f64, snr_db: Option<f64>) -> Self {
        Self {
            kind: ChannelKind::MultipathFir,
            num_taps,
            pdp_decay,
            ..Self::awgn(snr_db)
        }
    }

    /// Short label written into dataset manifests.
    pub fn tag(&self) -> String {
        match self.kind {
            ChannelKind::Awgn => "awgn".to_string(),
            ChannelKind::RicianFlat => format!("rician_k{}", self.rician_k),
            ChannelKind::MultipathFir => format!("fir{}", self.num_taps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::config(
                    "snr_db must be finite; use null for a noiseless channel",
                ));
            }
        }
        if self.num_taps == 0 {
            return Err(Error::config("num_taps must be at least 1"));
        }
        if !(self.rician_k >= 0.0 && self.rician_k.is_finite()) {
            return Err(Error::config("rician_k must be finite and non-negative"));
        }
        if !(self.pdp_decay >= 0.0 && self.pdp_decay.is_finite()) {
            return Err(Error::config("pdp_decay must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One draw from CN(0, 1).
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Adds circular Gaussian noise at `snr_db` relative to the mean power of `x`.
pub fn add_awgn<R: Rng + ?Sized>(x: &ComplexSignal, snr_db: f64, rng: &mut R) -> ComplexSignal {
    let noise_power = x.mean_power() / 10f64.powf(snr_db / 10.0);
    let scale = noise_power.sqrt();
    let samples = x
        .samples
        .iter()
        .map(|&v| v + complex_gaussian(rng) * scale)
        .collect();
    ComplexSignal::new(samples, x.sample_rate)
}

fn fir_taps<R: Rng + ?Sized>(num_taps: usize, decay: f64, rng: &mut R) -> Vec<Complex64> {
    if num_taps == 1 {
        return vec![Complex64::new(1.0, 0.0)];
    }
    let mut taps: Vec<Complex64> = (0..num_taps)
        .map(|l| complex_gaussian(rng) * (-(l as f64) * decay).exp().sqrt())
        .collect();
    let power: f64 = taps.iter().map(|t| t.norm_sqr()).sum();
    let norm = power.sqrt();
    if norm > 0.0 {
        for t in &mut taps {
            *t /= norm;
        }
    }
    taps
}

/// Causal convolution truncated to the input length.
pub(crate) fn convolve_causal(x: &[Complex64], taps: &[Complex64]) -> Vec<Complex64> {
    (0..x.len())
        .map(|k| {
            taps.iter()
                .enumerate()
                .take(k + 1)
                .map(|(l, &h)| h * x[k - l])
                .sum()
        })
        .collect()
}

/// Passes `x` through one fresh realization of the channel.
pub fn apply_channel<R: Rng + ?Sized>(
    x: &ComplexSignal,
    c: &ChannelSpec,
    rng: &mut R,
) -> Result<ComplexSignal> {
    c.validate()?;
    x.ensure_finite()?;
    let faded = match c.kind {
        ChannelKind::Awgn => x.clone(),
        ChannelKind::RicianFlat => {
            let k = c.rician_k;
            let los = (k / (k + 1.0)).sqrt();
            let scatter = (1.0 / (k + 1.0)).sqrt();
            let h = Complex64::new(los, 0.0) + complex_gaussian(rng) * scatter;
            ComplexSignal::new(x.samples.iter().map(|&v| h * v).collect(), x.sample_rate)
        }
        ChannelKind::MultipathFir => {
            let taps = fir_taps(c.num_taps, c.pdp_decay, rng);
            ComplexSignal::new(convolve_causal(&x.samples, &taps), x.sample_rate)
        }
    };
    Ok(match c.snr_db {
        Some(snr) => add_awgn(&faded, snr, rng),
        None => faded,
    })
}
