use rand::Rng;

use super::params::{join, Module, Param};
use super::real::{matmul_acc, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How a forward pass treats normalization statistics and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated on backward.
    Train,
    /// Batch statistics, no running-statistic update. Used when a network is
    /// held fixed but gradients must still reach its input.
    Frozen,
    /// Running statistics.
    Eval,
}

impl Mode {
    pub fn batch_stats(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

const COLS_BUDGET: usize = 1 << 18;

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    x: Tensor<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Self {
            weight: Param::uniform(&[c_out, c_in, kernel, kernel], bound, rng),
            bias: Param::uniform(&[c_out], bound, rng),
            kernel,
            stride,
            pad,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn chunk(&self, b: usize, ho: usize, wo: usize) -> usize {
        let kdim = self.c_in() * self.kernel * self.kernel;
        (COLS_BUDGET / (kdim * ho * wo).max(1)).clamp(1, b)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.c_in() {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {c}",
                self.c_in()
            )));
        }
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            return Err(Error::Shape(format!("conv input {h}x{w} smaller than kernel")));
        }
        let (ho, wo) = self.out_hw(h, w);
        let co = self.c_out();
        let n = ho * wo;
        let kdim = c * self.kernel * self.kernel;
        let mut y = Tensor::zeros(&[b, co, ho, wo]);
        let chunk = self.chunk(b, ho, wo);
        let mut cols = vec![T::zero(); kdim * chunk * n];
        let mut out = vec![T::zero(); co * chunk * n];
        let img = c * h * w;
        let wdat = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut start = 0;
        while start < b {
            let nb = chunk.min(b - start);
            let ld = nb * n;
            for i in 0..nb {
                im2col(
                    &x.data()[(start + i) * img..(start + i + 1) * img],
                    (c, h, w),
                    (self.kernel, self.stride, self.pad),
                    (ho, wo),
                    &mut cols,
                    ld,
                    i * n,
                );
            }
            matmul_acc(wdat, false, &cols[..kdim * ld], false, &mut out[..co * ld], co, kdim, ld, T::zero());
            let yd = y.data_mut();
            for i in 0..nb {
                for o in 0..co {
                    let dst = &mut yd[((start + i) * co + o) * n..((start + i) * co + o + 1) * n];
                    let src = &out[o * ld + i * n..o * ld + (i + 1) * n];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias[o];
                    }
                }
            }
            start += nb;
        }
        Ok((y, ConvCache { x: x.clone() }))
    }

    pub fn backward(
        &mut self,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        accumulate: bool,
    ) -> Result<Tensor<T>> {
        let x = &cache.x;
        let (b, c, h, w) = x.dims4()?;
        let (_, co, ho, wo) = dy.dims4()?;
        let n = ho * wo;
        let kdim = c * self.kernel * self.kernel;
        let chunk = self.chunk(b, ho, wo);
        let mut cols = vec![T::zero(); kdim * chunk * n];
        let mut dyc = vec![T::zero(); co * chunk * n];
        let mut dcols = vec![T::zero(); kdim * chunk * n];
        let mut dx = Tensor::zeros(x.shape());
        let img = c * h * w;
        let mut start = 0;
        while start < b {
            let nb = chunk.min(b - start);
            let ld = nb * n;
            for i in 0..nb {
                for o in 0..co {
                    let src = &dy.data()[((start + i) * co + o) * n..((start + i) * co + o + 1) * n];
                    dyc[o * ld + i * n..o * ld + (i + 1) * n].copy_from_slice(src);
                }
            }
            if accumulate {
                for i in 0..nb {
                    im2col(
                        &x.data()[(start + i) * img..(start + i + 1) * img],
                        (c, h, w),
                        (self.kernel, self.stride, self.pad),
                        (ho, wo),
                        &mut cols,
                        ld,
                        i * n,
                    );
                }
                matmul_acc(
                    &dyc[..co * ld],
                    false,
                    &cols[..kdim * ld],
                    true,
                    self.weight.grad.data_mut(),
                    co,
                    ld,
                    kdim,
                    T::one(),
                );
                let gb = self.bias.grad.data_mut();
                for o in 0..co {
                    gb[o] += dyc[o * ld..(o + 1) * ld].iter().copied().sum::<T>();
                }
            }
            matmul_acc(
                self.weight.value.data(),
                true,
                &dyc[..co * ld],
                false,
                &mut dcols[..kdim * ld],
                kdim,
                co,
                ld,
                T::zero(),
            );
            for i in 0..nb {
                col2im(
                    &dcols,
                    ld,
                    i * n,
                    (c, h, w),
                    (self.kernel, self.stride, self.pad),
                    (ho, wo),
                    &mut dx.data_mut()[(start + i) * img..(start + i + 1) * img],
                );
            }
            start += nb;
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside `[0, w)`.
fn valid_range(kx: usize, stride: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kx {
        ((w - 1 + pad - kx) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (k, stride, pad): (usize, usize, usize),
    (ho, wo): (usize, usize),
    cols: &mut [T],
    ld: usize,
    off: usize,
) {
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * ld + off;
                let (lo, hi) = valid_range(kx, stride, pad, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[base + oy * wo..base + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let ix0 = lo * stride + kx - pad;
                        if stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (d, s) in dst[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    ld: usize,
    off: usize,
    (c, h, w): (usize, usize, usize),
    (k, stride, pad): (usize, usize, usize),
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * ld + off;
                let (lo, hi) = valid_range(kx, stride, pad, w, wo);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * stride + kx - pad;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[base + oy * wo + lo..base + oy * wo + hi];
                    let dst = &mut plane[iy as usize * w + ix0..(iy as usize + 1) * w];
                    if stride == 1 {
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (d, &s) in dst.iter_mut().step_by(stride).zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel normalization over batch and spatial positions. Accepts
/// `(B, C, H, W)` or `(B, C)`.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
    mode: Mode,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::filled(&[channels], 0.0),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(
                Tensor::new(&[channels], vec![T::one(); channels]).expect("sized"),
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn layout(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        match x.shape() {
            [b, c] => Ok((*b, *c, 1)),
            [b, c, h, w] => Ok((*b, *c, h * w)),
            s => Err(Error::Shape(format!("batch norm on shape {s:?}"))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (b, c, hw) = Self::layout(x)?;
        if c != self.gamma.value.len() {
            return Err(Error::Shape(format!(
                "batch norm has {} channels, input {c}",
                self.gamma.value.len()
            )));
        }
        let count = b * hw;
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut unbiased = vec![0.0; c];
        if mode.batch_stats() {
            for bi in 0..b {
                for ci in 0..c {
                    let s = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    mean[ci] += s.iter().map(|v| v.as_f64()).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let s = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let m = mean[ci];
                    var[ci] += s.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                }
            }
            for ci in 0..c {
                unbiased[ci] = if count > 1 {
                    var[ci] / (count - 1) as f64
                } else {
                    var[ci]
                };
                var[ci] /= count as f64;
            }
        } else {
            mean = self.running_mean.value.to_f64();
            var = self.running_var.value.to_f64();
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v + self.eps).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let g = self.gamma.value.data();
        let be = self.beta.value.data();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        {
            let xh = xhat.data_mut();
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                    for j in r {
                        xh[j] = (xd[j] - mean_t[ci]) * inv_std[ci];
                    }
                }
            }
        }
        {
            let yd = y.data_mut();
            let xh = xhat.data();
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                    for j in r {
                        yd[j] = g[ci] * xh[j] + be[ci];
                    }
                }
            }
        }
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: unbiased,
                mode,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        accumulate: bool,
    ) -> Result<Tensor<T>> {
        let (b, c, hw) = Self::layout(dy)?;
        let count = T::from_usize(b * hw).expect("count");
        let dyd = dy.data();
        let xh = cache.xhat.data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xh = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                for j in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                    sum_dy[ci] += dyd[j];
                    sum_dy_xh[ci] += dyd[j] * xh[j];
                }
            }
        }
        if accumulate {
            for ci in 0..c {
                self.gamma.grad.data_mut()[ci] += sum_dy_xh[ci];
                self.beta.grad.data_mut()[ci] += sum_dy[ci];
            }
        }
        if cache.mode == Mode::Train {
            let m = self.momentum;
            for ci in 0..c {
                let rm = &mut self.running_mean.value.data_mut()[ci];
                *rm = T::from_f64_lossy((1.0 - m) * rm.as_f64() + m * cache.batch_mean[ci]);
                let rv = &mut self.running_var.value.data_mut()[ci];
                *rv = T::from_f64_lossy(
                    (1.0 - m) * rv.as_f64() + m * cache.batch_var_unbiased[ci],
                );
            }
        }
        let g = self.gamma.value.data();
        let mut dx = Tensor::zeros(dy.shape());
        let dxd = dx.data_mut();
        let batch = cache.mode.batch_stats();
        for bi in 0..b {
            for ci in 0..c {
                let scale = g[ci] * cache.inv_std[ci];
                for j in (bi * c + ci) * hw..(bi * c + ci + 1) * hw {
                    dxd[j] = if batch {
                        scale * (dyd[j] - sum_dy[ci] / count - xh[j] * sum_dy_xh[ci] / count)
                    } else {
                        scale * dyd[j]
                    };
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Fully connected layer on `(B, D_in)`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct LinearCache<T> {
    x: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[d_out, d_in], bound, rng),
            bias: Param::uniform(&[d_out], bound, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LinearCache<T>)> {
        let (b, d) = x.dims2()?;
        if d != self.d_in() {
            return Err(Error::Shape(format!(
                "linear expects {} inputs, got {d}",
                self.d_in()
            )));
        }
        let o = self.d_out();
        let mut y = Tensor::zeros(&[b, o]);
        {
            let yd = y.data_mut();
            for bi in 0..b {
                yd[bi * o..(bi + 1) * o].copy_from_slice(self.bias.value.data());
            }
            matmul_acc(x.data(), false, self.weight.value.data(), true, yd, b, d, o, T::one());
        }
        Ok((y, LinearCache { x: x.clone() }))
    }

    pub fn backward(
        &mut self,
        cache: &LinearCache<T>,
        dy: &Tensor<T>,
        accumulate: bool,
    ) -> Result<Tensor<T>> {
        let (b, o) = dy.dims2()?;
        let d = self.d_in();
        if accumulate {
            matmul_acc(dy.data(), true, cache.x.data(), false, self.weight.grad.data_mut(), o, b, d, T::one());
            let gb = self.bias.grad.data_mut();
            for bi in 0..b {
                for j in 0..o {
                    gb[j] += dy.data()[bi * o + j];
                }
            }
        }
        let mut dx = Tensor::zeros(&[b, d]);
        matmul_acc(dy.data(), false, self.weight.value.data(), false, dx.data_mut(), b, o, d, T::zero());
        Ok(dx)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Leaky rectifier; slope 0 gives a plain ReLU. The cache is the output,
/// whose sign matches the input's for non-negative slopes.
pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64_lossy(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

pub fn leaky_relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    let s = T::from_f64_lossy(slope);
    y.zip_map(dy, |yv, g| if yv > T::zero() { g } else { g * s })
}

/// 2x2 max pooling, stride 2. Returns the winning input offsets.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool needs even dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let mut arg = vec![0usize; b * c * ho * wo];
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = p * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                yd[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2_backward<T: Real>(arg: &[usize], in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for (&a, &g) in arg.iter().zip(dy.data()) {
        dxd[a] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let xd = x.data();
    let yd = y.data_mut();
    for p in 0..b * c {
        for oy in 0..ho {
            let src = &xd[p * h * w + (oy / 2) * w..p * h * w + (oy / 2 + 1) * w];
            let dst = &mut yd[p * ho * wo + oy * wo..p * ho * wo + (oy + 1) * wo];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    Ok(y)
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, ho, wo) = dy.dims4()?;
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for p in 0..b * c {
        for oy in 0..ho {
            let src = &dyd[p * ho * wo + oy * wo..p * ho * wo + (oy + 1) * wo];
            let dst = &mut dxd[p * h * w + (oy / 2) * w..p * h * w + (oy / 2 + 1) * w];
            for (ox, &g) in src.iter().enumerate() {
                dst[ox / 2] += g;
            }
        }
    }
    Ok(dx)
}

/// Channel concatenation of two `(B, C, H, W)` tensors.
pub fn cat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "channel concat of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut data = Vec::with_capacity(n * (sa + sb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        data.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Tensor::new(&[n, ca + cb, h, w], data)
}

/// Inverse of [`cat_channels`] for gradients: splits after `ca` channels.
pub fn split_channels<T: Real>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let cb = c - ca;
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * sa);
    let mut b = Vec::with_capacity(n * sb);
    for i in 0..n {
        let row = &x.data()[i * (sa + sb)..(i + 1) * (sa + sb)];
        a.extend_from_slice(&row[..sa]);
        b.extend_from_slice(&row[sa..]);
    }
    Ok((Tensor::new(&[n, ca, h, w], a)?, Tensor::new(&[n, cb, h, w], b)?))
}

/// Conv, batch norm and (leaky) ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct ConvBnActCache<T> {
    conv: ConvCache<T>,
    bn: BnCache<T>,
    y: Tensor<T>,
}

impl<T: Real> ConvBnAct<T> {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(c_in, c_out, kernel, stride, kernel / 2, rng),
            bn: BatchNorm::new(c_out),
            slope,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ConvBnActCache<T>)> {
        let (h, conv) = self.conv.forward(x)?;
        let (h, bn) = self.bn.forward(&h, mode)?;
        let y = leaky_relu(&h, self.slope);
        Ok((y.clone(), ConvBnActCache { conv, bn, y }))
    }

    pub fn backward(
        &mut self,
        cache: &ConvBnActCache<T>,
        dy: &Tensor<T>,
        accumulate: bool,
    ) -> Result<Tensor<T>> {
        let d = leaky_relu_backward(&cache.y, dy, self.slope)?;
        let d = self.bn.backward(&cache.bn, &d, accumulate)?;
        self.conv.backward(&cache.conv, &d, accumulate)
    }
}

impl<T: Real> Module<T> for ConvBnAct<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
