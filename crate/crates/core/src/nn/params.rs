use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named tensor with its gradient accumulator. Non-trainable entries hold
/// running statistics and are skipped by optimizers.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
        Self::new(Tensor::new(shape, data).expect("sized"))
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self::new(Tensor::new(shape, vec![T::from_f64_lossy(v); n]).expect("sized"))
    }
}

/// Anything that owns parameters. Visiting order is stable and defines
/// optimizer state layout, fingerprints and checkpoint order.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero())
        });
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    /// SHA-256 over names, shapes and values of every entry.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, p| {
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    fn state(&self) -> Vec<StateEntry> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| {
            out.push(StateEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                values: p.value.to_f64(),
            })
        });
        out
    }

    fn load_state(&mut self, state: &[StateEntry]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match state.get(i) {
                Some(e) if e.name == name && e.shape == p.value.shape() => {
                    for (dst, &src) in p.value.data_mut().iter_mut().zip(&e.values) {
                        *dst = T::from_f64_lossy(src);
                    }
                }
                Some(e) => {
                    err = Some(format!(
                        "entry {i}: expected {name} {:?}, found {} {:?}",
                        p.value.shape(),
                        e.name,
                        e.shape
                    ))
                }
                None => err = Some(format!("missing entry {name}")),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(Error::Shape(e));
        }
        if i != state.len() {
            return Err(Error::Shape(format!(
                "state has {} entries, module has {i}",
                state.len()
            )));
        }
        Ok(())
    }

    /// Sum of squared gradients of trainable entries.
    fn grad_sq_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                s += p.grad.data().iter().map(|g| g.as_f64().powi(2)).sum::<f64>()
            }
        });
        s
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the trainable entries of one module.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<T: Real, M: Module<T> + ?Sized>(&mut self, module: &mut M) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let init = self.m.is_empty();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        module.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if init {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            let grads = p.grad.data().to_vec();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[j].as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let update = c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w = T::from_f64_lossy(w.as_f64() - update);
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        p: Param<f64>,
    }

    impl Module<f64> for Quad {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&join(prefix, "p"), &self.p)
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join(prefix, "p"), &mut self.p)
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut q = Quad {
            p: Param::filled(&[2], 1.0),
        };
        q.p.grad = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut q);
        let d = q.p.value.data();
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((d[1] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut q = Quad {
            p: Param::filled(&[3], 0.25),
        };
        q.p.grad = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let before = q.fingerprint();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        opt.step(&mut q);
        assert_eq!(before, q.fingerprint());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut q = Quad {
            p: Param::filled(&[1], 5.0),
        };
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let x = q.p.value.data()[0];
            q.p.grad.data_mut()[0] = 2.0 * (x - 1.0);
            opt.step(&mut q);
        }
        assert!((q.p.value.data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn state_round_trip() {
        let q = Quad {
            p: Param::filled(&[2], 0.5),
        };
        let st = q.state();
        let mut r = Quad {
            p: Param::filled(&[2], 0.0),
        };
        r.load_state(&st).unwrap();
        assert_eq!(q.fingerprint(), r.fingerprint());
        let mut bad = Quad {
            p: Param::filled(&[3], 0.0),
        };
        assert!(bad.load_state(&st).is_err());
    }
}
