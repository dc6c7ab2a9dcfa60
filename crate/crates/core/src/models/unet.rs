use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    cat_channels, join, max_pool2, max_pool2_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, ConvBnAct, ConvBnActCache, ConvCache, Linear, LinearCache, Mode,
    Module, Param, Real, Tensor,
};
use crate::preprocessing::{IMAGE_CHANNELS, IMAGE_COLS, IMAGE_ROWS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    /// Encoder widths, one per resolution level.
    pub widths: [usize; 5],
    pub input_shape: [usize; 3],
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128, 256, 512],
            input_shape: [IMAGE_CHANNELS, IMAGE_ROWS, IMAGE_COLS],
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("u-net widths and input shape must be positive"));
        }
        let [_, h, w] = self.input_shape;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(format!(
                "u-net input {h}x{w} must be divisible by 16 for four 2x poolings"
            )));
        }
        Ok(())
    }

    /// Shape of the bottleneck image.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.widths[4], self.input_shape[1] / 16, self.input_shape[2] / 16]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape().iter().product()
    }
}

/// Two 3x3 conv + BN + ReLU layers, preserving height and width.
#[derive(Debug, Clone)]
pub struct DoubleConv<T> {
    a: ConvBnAct<T>,
    b: ConvBnAct<T>,
}

#[derive(Debug, Clone)]
pub struct DoubleConvCache<T>(ConvBnActCache<T>, ConvBnActCache<T>);

impl<T: Real> DoubleConv<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            a: ConvBnAct::new(c_in, c_out, 3, 1, 0.0, rng),
            b: ConvBnAct::new(c_out, c_out, 3, 1, 0.0, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, DoubleConvCache<T>)> {
        let (h, ca) = self.a.forward(x, mode)?;
        let (y, cb) = self.b.forward(&h, mode)?;
        Ok((y, DoubleConvCache(ca, cb)))
    }

    pub fn backward(&mut self, c: &DoubleConvCache<T>, dy: &Tensor<T>, acc: bool) -> Result<Tensor<T>> {
        let d = self.b.backward(&c.1, dy, acc)?;
        self.a.backward(&c.0, &d, acc)
    }
}

impl<T: Real> Module<T> for DoubleConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.a.visit(&join(prefix, "0"), f);
        self.b.visit(&join(prefix, "1"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.a.visit_mut(&join(prefix, "0"), f);
        self.b.visit_mut(&join(prefix, "1"), f);
    }
}

/// 2x2 max pooling followed by [`DoubleConv`].
#[derive(Debug, Clone)]
pub struct DownConv<T> {
    conv: DoubleConv<T>,
}

#[derive(Debug, Clone)]
pub struct DownConvCache<T> {
    arg: Vec<usize>,
    in_shape: Vec<usize>,
    conv: DoubleConvCache<T>,
}

impl<T: Real> DownConv<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            conv: DoubleConv::new(c_in, c_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, DownConvCache<T>)> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("down-convolution on odd size {h}x{w}")));
        }
        let (p, arg) = max_pool2(x)?;
        let (y, conv) = self.conv.forward(&p, mode)?;
        Ok((
            y,
            DownConvCache {
                arg,
                in_shape: x.shape().to_vec(),
                conv,
            },
        ))
    }

    pub fn backward(&mut self, c: &DownConvCache<T>, dy: &Tensor<T>, acc: bool) -> Result<Tensor<T>> {
        let d = self.conv.backward(&c.conv, dy, acc)?;
        Ok(max_pool2_backward(&c.arg, &c.in_shape, &d))
    }
}

impl<T: Real> Module<T> for DownConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(prefix, f);
    }
}

/// Nearest 2x upsampling followed by [`DoubleConv`].
#[derive(Debug, Clone)]
pub struct UpConv<T> {
    conv: DoubleConv<T>,
}

impl<T: Real> UpConv<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            conv: DoubleConv::new(c_in, c_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, DoubleConvCache<T>)> {
        self.conv.forward(&upsample2(x)?, mode)
    }

    pub fn backward(&mut self, c: &DoubleConvCache<T>, dy: &Tensor<T>, acc: bool) -> Result<Tensor<T>> {
        upsample2_backward(&self.conv.backward(c, dy, acc)?)
    }
}

impl<T: Real> Module<T> for UpConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(prefix, f);
    }
}

/// U-net with an additive input at the bottleneck.
#[derive(Debug, Clone)]
pub struct Unet<T> {
    pub config: UnetConfig,
    inc: DoubleConv<T>,
    down: Vec<DownConv<T>>,
    up: Vec<UpConv<T>>,
    out: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct UnetCache<T> {
    inc: DoubleConvCache<T>,
    down: Vec<DownConvCache<T>>,
    up: Vec<DoubleConvCache<T>>,
    out: ConvCache<T>,
}

impl<T: Real> Unet<T> {
    pub fn new<R: Rng + ?Sized>(config: UnetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.widths;
        let c = config.input_shape[0];
        let inc = DoubleConv::new(c, w[0], rng);
        let down = (1..5).map(|i| DownConv::new(w[i - 1], w[i], rng)).collect();
        // up[0] produces level 3 from the bottleneck; later steps take the
        // concatenated skip of the level above.
        let up = (0..4)
            .rev()
            .map(|i| {
                let c_in = if i == 3 { w[4] } else { 2 * w[i + 1] };
                UpConv::new(c_in, w[i], rng)
            })
            .collect();
        let out = Conv2d::new(2 * w[0], c, 1, 1, 0, rng);
        Ok(Self {
            config,
            inc,
            down,
            up,
            out,
        })
    }

    /// Runs the network with `latent_add` added to the bottleneck.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        latent_add: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, UnetCache<T>)> {
        if x.shape().len() != 4 || x.shape()[1..] != self.config.input_shape[..] {
            return Err(Error::Shape(format!(
                "u-net expects (B, {:?}), got {:?}",
                self.config.input_shape,
                x.shape()
            )));
        }
        let (h0, inc) = self.inc.forward(x, mode)?;
        let mut skips = vec![h0];
        let mut down = Vec::with_capacity(4);
        for d in &self.down {
            let (y, c) = d.forward(skips.last().expect("nonempty"), mode)?;
            skips.push(y);
            down.push(c);
        }
        let bottleneck = skips.pop().expect("bottleneck");
        if latent_add.shape() != bottleneck.shape() {
            return Err(Error::Shape(format!(
                "latent addition {:?} vs bottleneck {:?}",
                latent_add.shape(),
                bottleneck.shape()
            )));
        }
        let mut h = bottleneck.add(latent_add)?;
        let mut up = Vec::with_capacity(4);
        for u in &self.up {
            let (y, c) = u.forward(&h, mode)?;
            up.push(c);
            h = cat_channels(&y, &skips.pop().expect("skip"))?;
        }
        let (y, out) = self.out.forward(&h)?;
        Ok((y, UnetCache { inc, down, up, out }))
    }

    /// Returns gradients for the input image and the bottleneck addition.
    pub fn backward(
        &mut self,
        cache: &UnetCache<T>,
        dy: &Tensor<T>,
        acc: bool,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let w = self.config.widths;
        let mut d = self.out.backward(&cache.out, dy, acc)?;
        let mut dskips = Vec::with_capacity(4);
        for (k, (u, c)) in self.up.iter_mut().zip(&cache.up).enumerate().rev() {
            let level = 3 - k;
            let (dy_up, dskip) = split_channels(&d, w[level])?;
            dskips.push(dskip);
            d = u.backward(c, &dy_up, acc)?;
        }
        // dskips is indexed by level.
        let dlatent = d.clone();
        for (i, (dn, c)) in self.down.iter_mut().zip(&cache.down).enumerate().rev() {
            d = dn.backward(c, &d, acc)?;
            d.add_assign(&dskips[i])?;
        }
        let dx = self.inc.backward(&cache.inc, &d, acc)?;
        Ok((dx, dlatent))
    }

    pub fn latent_batch_shape(&self, batch: usize) -> [usize; 4] {
        let [c, h, w] = self.config.latent_shape();
        [batch, c, h, w]
    }
}

impl<T: Real> Module<T> for Unet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.inc.visit(&join(prefix, "inc"), f);
        for (i, d) in self.down.iter().enumerate() {
            d.visit(&join(prefix, &format!("down{}", i + 1)), f);
        }
        for (i, u) in self.up.iter().enumerate() {
            u.visit(&join(prefix, &format!("up{}", 4 - i)), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.inc.visit_mut(&join(prefix, "inc"), f);
        for (i, d) in self.down.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("down{}", i + 1)), f);
        }
        for (i, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up{}", 4 - i)), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Background extractor `Q`: a U-net whose bottleneck receives standard
/// normal noise.
#[derive(Debug, Clone)]
pub struct BackgroundExtractor<T> {
    pub net: Unet<T>,
}

impl<T: Real> BackgroundExtractor<T> {
    pub fn new<R: Rng + ?Sized>(config: UnetConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            net: Unet::new(config, rng)?,
        })
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Tensor<T> {
        let shape = self.net.latent_batch_shape(batch);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(StandardNormal.sample(rng)))
            .collect();
        Tensor::new(&shape, data).expect("sized")
    }

    pub fn forward(&self, x: &Tensor<T>, noise: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, UnetCache<T>)> {
        self.net.forward(x, noise, mode)
    }

    /// Gradient with respect to the input image.
    pub fn backward(&mut self, cache: &UnetCache<T>, dy: &Tensor<T>, acc: bool) -> Result<Tensor<T>> {
        Ok(self.net.backward(cache, dy, acc)?.0)
    }
}

impl<T: Real> Module<T> for BackgroundExtractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.net.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.net.visit_mut(prefix, f);
    }
}

/// Generator `G`: a U-net over the background image whose bottleneck
/// receives a learned projection of the fingerprint.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub net: Unet<T>,
    pub proj: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct GeneratorCache<T> {
    proj: LinearCache<T>,
    net: UnetCache<T>,
}

impl<T: Real> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: UnetConfig, embed_dim: usize, rng: &mut R) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let latent = config.latent_len();
        let net = Unet::new(config, rng)?;
        Ok(Self {
            net,
            proj: Linear::new(embed_dim, latent, rng),
        })
    }

    pub fn forward(
        &self,
        z: &Tensor<T>,
        background: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, GeneratorCache<T>)> {
        let (b, _) = z.dims2()?;
        if background.shape().first() != Some(&b) {
            return Err(Error::Shape(format!(
                "{b} embeddings for background batch {:?}",
                background.shape()
            )));
        }
        let (p, proj) = self.proj.forward(z)?;
        let p = p.reshape(&self.net.latent_batch_shape(b))?;
        let (y, net) = self.net.forward(background, &p, mode)?;
        Ok((y, GeneratorCache { proj, net }))
    }

    /// Gradients for `(z, background)`.
    pub fn backward(
        &mut self,
        cache: &GeneratorCache<T>,
        dy: &Tensor<T>,
        acc: bool,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (dbg, dlat) = self.net.backward(&cache.net, dy, acc)?;
        let b = dlat.batch();
        let dlat = dlat.reshape(&[b, self.net.config.latent_len()])?;
        let dz = self.proj.backward(&cache.proj, &dlat, acc)?;
        Ok((dz, dbg))
    }
}

impl<T: Real> Module<T> for Generator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.net.visit(prefix, f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.net.visit_mut(prefix, f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
