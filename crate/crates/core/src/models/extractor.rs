use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, ConvBnAct, ConvBnActCache, Linear, LinearCache, Mode, Module, Param, Real, Tensor};
use crate::preprocessing::{IMAGE_CHANNELS, IMAGE_COLS, IMAGE_ROWS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Total number of convolution layers.
    pub layers: usize,
    pub embed_dim: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub leaky_slope: f64,
    pub input_shape: [usize; 3],
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            layers: 18,
            embed_dim: 128,
            base_width: 32,
            max_width: 256,
            leaky_slope: 0.2,
            input_shape: [IMAGE_CHANNELS, IMAGE_ROWS, IMAGE_COLS],
        }
    }
}

const KERNEL: usize = 3;

impl ExtractorConfig {
    /// Spatial size after each stride-2 stage, halving until both sides
    /// drop below the kernel size.
    pub fn stage_dims(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        let mut dims = Vec::new();
        while h >= KERNEL || w >= KERNEL {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            dims.push((h, w));
        }
        dims
    }

    pub fn layers_per_stage(&self) -> Result<Vec<usize>> {
        let stages = self.stage_dims().len();
        if stages == 0 {
            return Err(Error::config("input is already smaller than the filter"));
        }
        if self.layers < stages {
            return Err(Error::config(format!(
                "{} layers cannot reach sub-filter maps; need at least {stages}",
                self.layers
            )));
        }
        let (q, r) = (self.layers / stages, self.layers % stages);
        Ok((0..stages).map(|s| q + usize::from(s < r)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::config("extractor needs at least 2 layers"));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embedding dimension must be at least 2"));
        }
        if self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::config("extractor widths must satisfy 0 < base <= max"));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("extractor input shape must be positive"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config("leaky slope must lie in [0, 1)"));
        }
        self.layers_per_stage().map(|_| ())
    }
}

/// Fingerprint extractor `F`: strided 3x3 convolution stages followed by
/// one fully connected layer.
#[derive(Debug, Clone)]
pub struct Extractor<T> {
    pub config: ExtractorConfig,
    blocks: Vec<ConvBnAct<T>>,
    fc: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct ExtractorCache<T> {
    blocks: Vec<ConvBnActCache<T>>,
    feat_shape: Vec<usize>,
    fc: LinearCache<T>,
}

impl<T: Real> Extractor<T> {
    pub fn new<R: Rng + ?Sized>(config: ExtractorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let per_stage = config.layers_per_stage()?;
        let mut blocks = Vec::with_capacity(config.layers);
        let mut c_in = config.input_shape[0];
        let mut width = config.base_width;
        for (s, &n) in per_stage.iter().enumerate() {
            if s > 0 {
                width = (width * 2).min(config.max_width);
            }
            for l in 0..n {
                let stride = if l == 0 { 2 } else { 1 };
                blocks.push(ConvBnAct::new(c_in, width, KERNEL, stride, config.leaky_slope, rng));
                c_in = width;
            }
        }
        let (h, w) = *config.stage_dims().last().expect("at least one stage");
        let fc = Linear::new(c_in * h * w, config.embed_dim, rng);
        Ok(Self { config, blocks, fc })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ExtractorCache<T>)> {
        let want = &self.config.input_shape;
        if x.shape().len() != 4 || x.shape()[1..] != want[..] {
            return Err(Error::Shape(format!(
                "extractor expects (B, {}, {}, {}), got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, mode)?;
            caches.push(c);
            h = y;
        }
        let feat_shape = h.shape().to_vec();
        let bsz = h.batch();
        let flat = h.reshape(&[bsz, feat_shape[1..].iter().product()])?;
        let (z, fc) = self.fc.forward(&flat)?;
        Ok((
            z,
            ExtractorCache {
                blocks: caches,
                feat_shape,
                fc,
            },
        ))
    }

    /// Embeddings only.
    pub fn embed(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward(x, mode)?.0)
    }

    pub fn backward(
        &mut self,
        cache: &ExtractorCache<T>,
        dz: &Tensor<T>,
        accumulate: bool,
    ) -> Result<Tensor<T>> {
        let d = self.fc.backward(&cache.fc, dz, accumulate)?;
        let mut d = d.reshape(&cache.feat_shape)?;
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d, accumulate)?;
        }
        Ok(d)
    }
}

impl<T: Real> Module<T> for Extractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.fc.visit(&join(prefix, "fc"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_error;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> ExtractorConfig {
        ExtractorConfig {
            layers: 6,
            embed_dim: 4,
            base_width: 2,
            max_width: 4,
            ..ExtractorConfig::default()
        }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = stream(seed, "x", 0);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    }

    #[test]
    fn default_schedule() {
        let c = ExtractorConfig::default();
        assert_eq!(c.layers, 18);
        assert_eq!(
            c.stage_dims(),
            vec![(8, 40), (4, 20), (2, 10), (1, 5), (1, 3), (1, 2)]
        );
        assert_eq!(c.layers_per_stage().unwrap(), vec![3; 6]);
        let c7 = ExtractorConfig { layers: 8, ..c.clone() };
        assert_eq!(c7.layers_per_stage().unwrap(), vec![2, 2, 1, 1, 1, 1]);
        assert!(ExtractorConfig { layers: 5, ..c.clone() }.validate().is_err());
        assert!(ExtractorConfig { embed_dim: 1, ..c.clone() }.validate().is_err());
        assert!(ExtractorConfig { input_shape: [2, 2, 2], ..c }.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let f = Extractor::<f64>::new(small(), &mut stream(1, "f", 0)).unwrap();
        let x = randn(&[3, 2, 16, 80], 2);
        let z = f.embed(&x, Mode::Eval).unwrap();
        assert_eq!(z.shape(), &[3, 4]);
        assert_eq!(z, f.embed(&x, Mode::Eval).unwrap());
        assert!(f.embed(&randn(&[1, 2, 16, 40], 3), Mode::Eval).is_err());
    }

    #[test]
    fn batch_permutation_is_consistent_in_eval() {
        let f = Extractor::<f64>::new(small(), &mut stream(4, "f", 0)).unwrap();
        let x = randn(&[4, 2, 16, 80], 5);
        let z = f.embed(&x, Mode::Eval).unwrap();
        let perm = [2, 0, 3, 1];
        let zp = f.embed(&x.select(&perm), Mode::Eval).unwrap();
        assert!(zp.max_abs_diff(&z.select(&perm)) < 1e-12);
    }

    #[test]
    fn input_and_parameter_gradients() {
        let cfg = ExtractorConfig {
            input_shape: [2, 4, 8],
            layers: 3,
            ..small()
        };
        let mut f = Extractor::<f64>::new(cfg, &mut stream(6, "f", 0)).unwrap();
        let x = randn(&[3, 2, 4, 8], 7);
        let r = randn(&[3, 4], 8);
        let (_, cache) = f.forward(&x, Mode::Frozen).unwrap();
        let probe = f.clone();
        let dx = f.backward(&cache, &r, true).unwrap();
        let loss = |m: &Extractor<f64>, xt: &Tensor<f64>| {
            let z = m.embed(xt, Mode::Frozen).unwrap();
            z.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = stream(9, "dirs", 0);
        let mut fx = |v: &[f64]| loss(&probe, &Tensor::new(x.shape(), v.to_vec()).unwrap());
        let e = max_rel_error(&mut fx, x.data(), dx.data(), 30, &mut g);
        assert!(e < 1e-4, "{e}");

        let mut flat = Vec::new();
        let mut grad = Vec::new();
        f.visit("", &mut |_, p| {
            if p.trainable {
                flat.extend_from_slice(p.value.data());
                grad.extend_from_slice(p.grad.data());
            }
        });
        let mut fp = |v: &[f64]| {
            let mut m = probe.clone();
            let mut off = 0;
            m.visit_mut("", &mut |_, p| {
                if p.trainable {
                    let n = p.value.len();
                    p.value.data_mut().copy_from_slice(&v[off..off + n]);
                    off += n;
                }
            });
            loss(&m, &x)
        };
        let e = max_rel_error(&mut fp, &flat, &grad, 30, &mut g);
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn frozen_backward_leaves_grads_and_stats() {
        let mut f = Extractor::<f64>::new(small(), &mut stream(10, "f", 0)).unwrap();
        let before = f.fingerprint();
        let x = randn(&[2, 2, 16, 80], 11);
        let (z, cache) = f.forward(&x, Mode::Frozen).unwrap();
        f.backward(&cache, &z, false).unwrap();
        assert_eq!(before, f.fingerprint());
        assert_eq!(f.grad_sq_norm(), 0.0);
    }
}
