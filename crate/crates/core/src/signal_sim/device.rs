use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ComplexSignal;
use crate::error::{Error, Result};

/// Memoryless transmitter impairments of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub device_id: usize,
    /// IQ gain mismatch `g`; the I branch is scaled by `1 + g`.
    pub iq_gain_mismatch: f64,
    /// IQ phase mismatch in radians.
    pub iq_phase_mismatch: f64,
    /// Carrier frequency offset in Hz.
    pub cfo: f64,
    pub dc_offset: Complex64,
    pub pa_a1: Complex64,
    pub pa_a3: Complex64,
}

impl DeviceProfile {
    pub fn identity(device_id: usize) -> Self {
        Self {
            device_id,
            iq_gain_mismatch: 0.0,
            iq_phase_mismatch: 0.0,
            cfo: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            pa_a1: Complex64::new(1.0, 0.0),
            pa_a3: Complex64::new(0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pa_a1.norm() == 0.0 {
            return Err(Error::config(format!(
                "device {}: pa_a1 must be nonzero",
                self.device_id
            )));
        }
        let vals = [
            self.iq_gain_mismatch,
            self.iq_phase_mismatch,
            self.cfo,
            self.dc_offset.re,
            self.dc_offset.im,
            self.pa_a1.re,
            self.pa_a1.im,
            self.pa_a3.re,
            self.pa_a3.im,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "device {}: non-finite impairment parameter",
                self.device_id
            )));
        }
        Ok(())
    }
}

/// Distributions from which device impairments are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpairmentSpread {
    /// Standard deviation of the IQ gain mismatch.
    pub iq_gain_std: f64,
    /// Standard deviation of the IQ phase mismatch, degrees.
    pub iq_phase_std_deg: f64,
    /// CFO is uniform in `[-cfo_max_hz, cfo_max_hz]`.
    pub cfo_max_hz: f64,
    /// `|a3|` is uniform in this range, with uniform phase.
    pub pa_a3_mag: [f64; 2],
    /// `|dc|` is uniform in `[0, dc_max]`, with uniform phase.
    pub dc_max: f64,
}

impl Default for ImpairmentSpread {
    fn default() -> Self {
        Self {
            iq_gain_std: 0.05,
            iq_phase_std_deg: 2.0,
            cfo_max_hz: 30e3,
            pa_a3_mag: [0.01, 0.05],
            dc_max: 0.01,
        }
    }
}

impl ImpairmentSpread {
    pub fn draw<R: Rng + ?Sized>(&self, device_id: usize, rng: &mut R) -> DeviceProfile {
        let gain = Normal::new(0.0, self.iq_gain_std.max(0.0))
            .expect("finite std")
            .sample(rng);
        let phase = Normal::new(0.0, self.iq_phase_std_deg.max(0.0).to_radians())
            .expect("finite std")
            .sample(rng);
        let cfo = if self.cfo_max_hz > 0.0 {
            rng.random_range(-self.cfo_max_hz..=self.cfo_max_hz)
        } else {
            0.0
        };
        let [lo, hi] = self.pa_a3_mag;
        let a3_mag = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let a3 = Complex64::from_polar(a3_mag, rng.random_range(0.0..2.0 * PI));
        let dc_mag = if self.dc_max > 0.0 {
            rng.random_range(0.0..self.dc_max)
        } else {
            0.0
        };
        let dc = Complex64::from_polar(dc_mag, rng.random_range(0.0..2.0 * PI));
        DeviceProfile {
            device_id,
            iq_gain_mismatch: gain,
            iq_phase_mismatch: phase,
            cfo,
            dc_offset: dc,
            pa_a1: Complex64::new(1.0, 0.0),
            pa_a3: a3,
        }
    }
}

/// Applies the transmitter chain: CFO rotation, IQ imbalance, cubic PA,
/// DC offset.
pub fn apply_device(s: &ComplexSignal, p: &DeviceProfile) -> Result<ComplexSignal> {
    s.ensure_finite()?;
    let (sin_psi, cos_psi) = p.iq_phase_mismatch.sin_cos();
    let step = 2.0 * PI * p.cfo / s.sample_rate;
    let samples = s
        .samples
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let u = if p.cfo == 0.0 {
                x
            } else {
                x * Complex64::from_polar(1.0, step * k as f64)
            };
            let w = if p.iq_gain_mismatch == 0.0 && p.iq_phase_mismatch == 0.0 {
                u
            } else {
                Complex64::new(
                    (1.0 + p.iq_gain_mismatch) * u.re,
                    u.im * cos_psi + u.re * sin_psi,
                )
            };
            let v = if p.pa_a3 == Complex64::new(0.0, 0.0) {
                p.pa_a1 * w
            } else {
                p.pa_a1 * w + p.pa_a3 * w.norm_sqr() * w
            };
            v + p.dc_offset
        })
        .collect();
    Ok(ComplexSignal::new(samples, s.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_sim::{gen_preamble, PreambleConfig};

    fn preamble() -> ComplexSignal {
        gen_preamble(&PreambleConfig::default()).unwrap()
    }

    #[test]
    fn identity_profile_is_exact_identity() {
        let s = preamble();
        let out = apply_device(&s, &DeviceProfile::identity(0)).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn cfo_rotates_by_expected_phase() {
        let s = ComplexSignal::new(vec![Complex64::new(1.0, 0.0); 64], 1e7);
        let p = DeviceProfile {
            cfo: 1e5,
            ..DeviceProfile::identity(0)
        };
        let out = apply_device(&s, &p).unwrap();
        // 2*pi * 1e5 * 25 / 1e7 = pi/2
        let expected = Complex64::new(0.0, 1.0);
        assert!((out.samples[25] - expected).norm() < 1e-12);
    }

    #[test]
    fn cfo_preserves_energy() {
        let s = preamble();
        let p = DeviceProfile {
            cfo: 23_456.7,
            ..DeviceProfile::identity(0)
        };
        let out = apply_device(&s, &p).unwrap();
        let rel = (out.energy() - s.energy()).abs() / s.energy();
        assert!(rel < 1e-9);
    }

    #[test]
    fn cubic_pa_compresses_unit_input() {
        let u = Complex64::from_polar(1.0, 0.3);
        let s = ComplexSignal::new(vec![u; 16], 1e7);
        let p = DeviceProfile {
            pa_a3: Complex64::new(-0.1, 0.0),
            ..DeviceProfile::identity(0)
        };
        let out = apply_device(&s, &p).unwrap();
        for v in &out.samples {
            assert!((v - 0.9 * u).norm() < 1e-12);
        }
    }

    #[test]
    fn iq_imbalance_formula() {
        let s = ComplexSignal::new(vec![Complex64::new(0.5, -0.25)], 1e7);
        let p = DeviceProfile {
            iq_gain_mismatch: 0.1,
            iq_phase_mismatch: 0.2,
            ..DeviceProfile::identity(0)
        };
        let out = apply_device(&s, &p).unwrap().samples[0];
        assert!((out.re - 1.1 * 0.5).abs() < 1e-15);
        assert!((out.im - (-0.25 * 0.2f64.cos() + 0.5 * 0.2f64.sin())).abs() < 1e-15);
    }

    #[test]
    fn distinct_devices_leave_distinct_fingerprints() {
        let s = preamble();
        let mut rng = crate::rng::stream(1, "devices", 0);
        let spread = ImpairmentSpread::default();
        let a = apply_device(&s, &spread.draw(0, &mut rng)).unwrap();
        let b = apply_device(&s, &spread.draw(1, &mut rng)).unwrap();
        let mean_diff: f64 = a
            .samples
            .iter()
            .zip(&b.samples)
            .map(|(x, y)| (x - y).norm())
            .sum::<f64>()
            / s.len() as f64;
        assert!(mean_diff > 0.0);
    }

    #[test]
    fn rejects_non_finite_input_and_zero_gain() {
        let s = ComplexSignal::new(vec![Complex64::new(f64::NAN, 0.0)], 1e7);
        assert!(apply_device(&s, &DeviceProfile::identity(0)).is_err());
        let p = DeviceProfile {
            pa_a1: Complex64::new(0.0, 0.0),
            ..DeviceProfile::identity(0)
        };
        assert!(p.validate().is_err());
    }
}
