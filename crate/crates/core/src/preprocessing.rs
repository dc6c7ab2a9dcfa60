//! Signal normalization and the 2x16x80 image layout used by every network.
//!
//! Row `r` of the image holds samples `[80r, 80r + 80)`: one half-symbol
//! per row, real part in channel 0 and imaginary part in channel 1.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::signal_sim::ComplexSignal;

pub const IMAGE_CHANNELS: usize = 2;
pub const IMAGE_ROWS: usize = 16;
pub const IMAGE_COLS: usize = 80;
pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_ROWS * IMAGE_COLS;
pub const SIGNAL_LEN: usize = IMAGE_ROWS * IMAGE_COLS;

/// Channel-major `(2, 16, 80)` real image.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalImage {
    data: Vec<f64>,
}

impl SignalImage {
    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; IMAGE_LEN],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.len() != IMAGE_LEN {
            return Err(Error::Shape(format!(
                "image needs {IMAGE_LEN} values, got {}",
                data.len()
            )));
        }
        Ok(Self { data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (IMAGE_CHANNELS, IMAGE_ROWS, IMAGE_COLS)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(ch: usize, row: usize, col: usize) -> usize {
        (ch * IMAGE_ROWS + row) * IMAGE_COLS + col
    }

    pub fn get(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.data[Self::offset(ch, row, col)]
    }

    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: f64) {
        self.data[Self::offset(ch, row, col)] = v;
    }

    /// One channel as a row-major `16 x 80` slice.
    pub fn channel(&self, ch: usize) -> &[f64] {
        &self.data[ch * SIGNAL_LEN..(ch + 1) * SIGNAL_LEN]
    }
}

/// Scales the signal by the largest real or imaginary component magnitude.
pub fn normalize(x: &ComplexSignal) -> Result<ComplexSignal> {
    let scale = x
        .samples
        .iter()
        .map(|s| s.re.abs().max(s.im.abs()))
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Err(Error::DegenerateSignal);
    }
    if !scale.is_finite() {
        return Err(Error::config("signal contains non-finite samples"));
    }
    let samples = x.samples.iter().map(|s| s / scale).collect();
    Ok(ComplexSignal::new(samples, x.sample_rate))
}

pub fn signal_to_image(x: &ComplexSignal) -> Result<SignalImage> {
    if x.len() != SIGNAL_LEN {
        return Err(Error::Shape(format!(
            "signal must have {SIGNAL_LEN} samples, got {}",
            x.len()
        )));
    }
    let mut data = vec![0.0; IMAGE_LEN];
    let (re, im) = data.split_at_mut(SIGNAL_LEN);
    for (k, s) in x.samples.iter().enumerate() {
        // k = row * 80 + col, and channel planes are row-major.
        re[k] = s.re;
        im[k] = s.im;
    }
    Ok(SignalImage { data })
}

pub fn image_to_signal(img: &SignalImage, sample_rate: f64) -> ComplexSignal {
    let samples = (0..SIGNAL_LEN)
        .map(|k| Complex64::new(img.data[k], img.data[SIGNAL_LEN + k]))
        .collect();
    ComplexSignal::new(samples, sample_rate)
}

/// `normalize` followed by `signal_to_image`.
pub fn prepare(x: &ComplexSignal) -> Result<SignalImage> {
    signal_to_image(&normalize(x)?)
}

/// Stacks images into a `(B, 2, 16, 80)` tensor.
pub fn images_to_tensor<T: Real>(images: &[&SignalImage]) -> Tensor<T> {
    let mut flat = Vec::with_capacity(images.len() * IMAGE_LEN);
    for img in images {
        flat.extend(img.data.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::new(&[images.len(), IMAGE_CHANNELS, IMAGE_ROWS, IMAGE_COLS], flat)
        .expect("image stack is sized")
}

/// Normalizes and stacks signals into a `(B, 2, 16, 80)` tensor.
pub fn prepare_batch<T: Real>(signals: &[&ComplexSignal]) -> Result<Tensor<T>> {
    let images = signals.iter().map(|s| prepare(s)).collect::<Result<Vec<_>>>()?;
    Ok(images_to_tensor(&images.iter().collect::<Vec<_>>()))
}

/// Splits a `(B, 2, 16, 80)` tensor back into images.
pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Result<Vec<SignalImage>> {
    if t.shape().len() != 4 || t.shape()[1..] != [IMAGE_CHANNELS, IMAGE_ROWS, IMAGE_COLS] {
        return Err(Error::Shape(format!(
            "expected (B, 2, 16, 80), got {:?}",
            t.shape()
        )));
    }
    Ok(t.to_f64()
        .chunks_exact(IMAGE_LEN)
        .map(|c| SignalImage { data: c.to_vec() })
        .collect())
}
